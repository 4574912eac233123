"""Run configuration: built-in defaults, JSON file loading, flag overrides.

Precedence is CLI override > config file > built-in default. Unknown keys
anywhere in the file or in an override path are rejected. The built-in
defaults mirror the reference hyperparameters (3-layer, 768-wide encoder,
pretrain lr 1e-4, align lr 0.004, 7 tokens, warmup ratio 0.01, momentum
0.7); desk-scale runs override the sizes in their config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .align import AlignConfig
from .errors import InvalidParameterError, ValidationError
from .pretrain import PretrainConfig


@dataclass
class EncoderSettings:
    num_layers: int = 3
    hidden_dim: int = 768

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise InvalidParameterError("encoder.num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise InvalidParameterError("encoder.hidden_dim must be >= 1")


@dataclass
class RunConfig:
    encoder: EncoderSettings
    pretrain: PretrainConfig
    align: AlignConfig

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config_dict() -> dict:
    return {
        "encoder": {"num_layers": 3, "hidden_dim": 768},
        "pretrain": {
            "epochs": 100,
            "batch_size": 4096,
            "learning_rate": 1e-4,
            "center_sample_cap": 1000,
            "temperature": 1.0,
            "seed": 0,
        },
        "align": {
            "total_steps": 1000,
            "batch_size": 3,
            "learning_rate": 0.004,
            "warmup_ratio": 0.01,
            "momentum": 0.7,
            "curriculum_temperature": 1.0,
            "num_tokens": 7,
            "token_dim": 64,
            "seed": 0,
            "weighting": "curriculum",
        },
    }


def _merge_checked(base: dict, incoming: dict, where: str) -> None:
    for key, value in incoming.items():
        if key not in base:
            raise ValidationError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where}{key!r} must be an object")
            _merge_checked(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def apply_override(data: dict, spec: str) -> None:
    """Apply one ``section.key=value`` override; value parses as JSON."""
    if "=" not in spec:
        raise ValidationError(f"override {spec!r} is not of the form key.path=value")
    path, raw = spec.split("=", 1)
    keys = path.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are allowed unquoted
    node = data
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ValidationError(f"unknown config section {key!r} in override {spec!r}")
        node = node[key]
    leaf = keys[-1]
    if leaf not in node:
        raise ValidationError(f"unknown config key {leaf!r} in override {spec!r}")
    if isinstance(node[leaf], dict):
        raise ValidationError(f"override {spec!r} targets a section, not a value")
    node[leaf] = value


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = default_config_dict()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                file_data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: config is not valid JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ValidationError(f"{path}: config root must be an object")
        _merge_checked(data, file_data, "")
    for spec in overrides or []:
        apply_override(data, spec)
    try:
        return RunConfig(
            encoder=EncoderSettings(**data["encoder"]),
            pretrain=PretrainConfig(**data["pretrain"]),
            align=AlignConfig(**data["align"]),
        )
    except TypeError as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
