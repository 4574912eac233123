"""Deterministic single-file checkpoint container and metrics CSV export.

Container layout (all integers little-endian):

    magic  b"UGCKPT\\x01"
    u32    version
    u32    metadata length
    bytes  UTF-8 JSON metadata (canonical: sorted keys, compact separators)
    u32    tensor count
    per tensor:
        u16    name length
        bytes  UTF-8 name
        u8     rank
        u64[]  dims
        f64[]  payload, row-major
    32B    SHA-256 of everything after the magic

Tensors are stored sorted by name and metadata JSON is canonical, so the
same logical checkpoint always produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .numcore import ParamSet

CHECKPOINT_MAGIC = b"UGCKPT\x01"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "step,domain,loss,grad_norm,smoothed,weight"
LOSS_LOG_HEADER = "epoch,mean_loss"


def format_float(x: float) -> str:
    """17 significant digits: exact round-trip for 64-bit floats."""
    return f"{float(x):.17g}"


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    def __post_init__(self) -> None:
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}

    def param_set(self, prefix: str = "") -> ParamSet:
        """Tensors under a prefix as a ParamSet, sorted by name."""
        names = sorted(k for k in self.tensors if k.startswith(prefix))
        return ParamSet({k: self.tensors[k] for k in names})


def _encode_tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValidationError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<I", ckpt.version)
    body += struct.pack("<I", len(meta)) + meta
    body += _encode_tensor_table(ckpt.tensors)
    digest = hashlib.sha256(body).digest()
    return CHECKPOINT_MAGIC + body + digest


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = encode_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())


class _Cursor:
    """Bounds-checked reader; any overrun is a truncation error."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends at byte {len(self.data)} but structure needs {self.pos + n}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC):
        raise TruncatedFileError(f"{path}: shorter than the container magic")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    if len(data) < len(CHECKPOINT_MAGIC) + 4 + 4 + 4 + 32:
        raise TruncatedFileError(f"{path}: shorter than an empty container")
    body = data[len(CHECKPOINT_MAGIC) : -32]
    stored_digest = data[-32:]

    cur = _Cursor(body)
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version} not supported")
    meta_len = cur.u32()
    meta_bytes = cur.take(meta_len)
    count = cur.u32()
    # Walk the structure with raw bytes only; nothing is decoded until the
    # checksum has vouched for the payload.
    spans: list[tuple[bytes, tuple[int, ...], int, int]] = []
    for _ in range(count):
        name_len = cur.u16()
        name_bytes = cur.take(name_len)
        rank = cur.u8()
        dims = tuple(cur.u64() for _ in range(rank))
        n_values = 1
        for dim in dims:
            n_values *= dim
        start = cur.pos
        cur.take(8 * n_values)
        spans.append((name_bytes, dims, start, cur.pos))
    if cur.pos != len(body):
        raise TruncatedFileError(f"{path}: {len(body) - cur.pos} unexpected trailing bytes")

    if hashlib.sha256(body).digest() != stored_digest:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    try:
        metadata = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: metadata is not valid JSON: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for name_bytes, dims, start, end in spans:
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: tensor name is not valid UTF-8") from exc
        if name in tensors:
            raise CheckpointFormatError(f"{path}: duplicate tensor name {name!r}")
        flat = np.frombuffer(body[start:end], dtype="<f8")
        tensors[name] = flat.astype(np.float64).reshape(dims)
    return Checkpoint(metadata=metadata, tensors=tensors, version=version)


def param_fingerprint(params: ParamSet) -> str:
    """SHA-256 hex digest of the parameter tensors in container encoding."""
    return hashlib.sha256(_encode_tensor_table(dict(params.items()))).hexdigest()


# --------------------------------------------------------------- CSV export


def _check_domain_field(domain: str) -> str:
    if "," in domain or "\n" in domain or "\r" in domain:
        raise ValidationError(f"domain id {domain!r} cannot appear in a CSV field")
    return domain


def export_metrics(rows: Iterable[Sequence], path) -> None:
    """Write curriculum metrics rows (step, domain, loss, g, smoothed, w)."""
    lines = [METRICS_HEADER]
    for step, domain, loss, grad_norm, smoothed, weight in rows:
        lines.append(
            ",".join(
                [
                    str(int(step)),
                    _check_domain_field(str(domain)),
                    format_float(loss),
                    format_float(grad_norm),
                    format_float(smoothed),
                    format_float(weight),
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_metrics(path) -> list[tuple[int, str, float, float, float, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValidationError(f"{path}: missing metrics header {METRICS_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 6:
            raise ValidationError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        step, domain, loss, grad_norm, smoothed, weight = parts
        rows.append(
            (int(step), domain, float(loss), float(grad_norm), float(smoothed), float(weight))
        )
    return rows


def export_loss_log(epoch_losses: Sequence[float], path) -> None:
    """Write the pretraining per-epoch mean-loss CSV."""
    lines = [LOSS_LOG_HEADER]
    for epoch, loss in enumerate(epoch_losses, start=1):
        lines.append(f"{epoch},{format_float(loss)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
