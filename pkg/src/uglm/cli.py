"""Command-line orchestration of the full pipeline.

Subcommands: ``synth`` (write the fixed benchmark suite), ``pretrain``
(Stage I), ``align`` (Stage II), ``eval`` (retrieval or classification),
``gradcheck`` (finite-difference verification), ``report`` (per-domain
trajectory CSVs from a metrics log).

Every run prints its fully resolved configuration as a single JSON line
before doing any work. Exit codes: 0 success, 1 validation/usage failure,
2 I/O failure, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .align import align_loop, evaluate_classification, projector_from_checkpoint, projector_to_checkpoint
from .config import load_run_config
from .errors import EmptyDataError, UglmError
from .gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from .graphdata import DomainDataset, load_dataset
from .persist import (
    export_loss_log,
    export_metrics,
    format_float,
    load_checkpoint,
    param_fingerprint,
    parse_metrics,
    save_checkpoint,
)
from .pretrain import encoder_from_checkpoint, encoder_to_checkpoint, evaluate_retrieval, pretrain_loop
from .synthgen import DEFAULT_MASTER_SEED, generate_benchmark_suite


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="uglm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the fixed synthetic benchmark suite")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED)

    p = sub.add_parser("pretrain", help="Stage I contrastive pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory of <domain>.jsonl/.emb pairs")
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    p.add_argument("--metrics", default=None, help="optional per-epoch loss CSV")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE")

    p = sub.add_parser("align", help="Stage II curriculum projector tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True, help="Stage I encoder checkpoint")
    p.add_argument("--out", required=True, help="projector checkpoint path")
    p.add_argument("--metrics", required=True, help="curriculum metrics CSV path")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE")

    p = sub.add_parser("eval", help="retrieval or classification evaluation")
    p.add_argument("--encoder", required=True)
    p.add_argument("--projector", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=["retrieval", "classification"])
    p.add_argument("--pool", type=int, default=100, help="retrieval candidate pool size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=21)

    p = sub.add_parser("report", help="split a metrics CSV into per-domain trajectories")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    return parser


def _echo(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _discover_datasets(data_dir: str) -> list[DomainDataset]:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory does not exist: {data_dir}")
    graph_paths = sorted(glob.glob(os.path.join(data_dir, "*.jsonl")))
    if not graph_paths:
        raise EmptyDataError(f"no *.jsonl dataset files found in {data_dir}")
    datasets = []
    for graph_path in graph_paths:
        emb_path = graph_path[: -len(".jsonl")] + ".emb"
        datasets.append(load_dataset(graph_path, emb_path))
    return datasets


def _cmd_synth(args) -> int:
    _echo({"command": "synth", "out": args.out, "seed": args.seed})
    written = generate_benchmark_suite(args.out, args.seed)
    _echo({"written": {name: list(paths) for name, paths in sorted(written.items())}})
    return 0


def _cmd_pretrain(args) -> int:
    run_config = load_run_config(args.config, args.set)
    _echo(
        {
            "command": "pretrain",
            "config": run_config.as_dict(),
            "data": args.data,
            "out": args.out,
            "metrics": args.metrics,
        }
    )
    datasets = _discover_datasets(args.data)
    result = pretrain_loop(
        run_config.pretrain,
        datasets,
        run_config.encoder.hidden_dim,
        run_config.encoder.num_layers,
    )
    ckpt = encoder_to_checkpoint(
        result.encoder,
        result.adapter,
        {
            "config": run_config.as_dict(),
            "seed": run_config.pretrain.seed,
            "domains": [ds.domain for ds in datasets],
        },
    )
    save_checkpoint(ckpt, args.out)
    if args.metrics:
        export_loss_log(result.epoch_losses, args.metrics)
    _echo(
        {
            "epochs": len(result.epoch_losses),
            "first_epoch_loss": result.epoch_losses[0] if result.epoch_losses else None,
            "final_epoch_loss": result.epoch_losses[-1] if result.epoch_losses else None,
        }
    )
    return 0


def _cmd_align(args) -> int:
    run_config = load_run_config(args.config, args.set)
    _echo(
        {
            "command": "align",
            "config": run_config.as_dict(),
            "data": args.data,
            "encoder": args.encoder,
            "out": args.out,
            "metrics": args.metrics,
        }
    )
    datasets = _discover_datasets(args.data)
    encoder, _ = encoder_from_checkpoint(load_checkpoint(args.encoder))
    state, head = align_loop(run_config.align, datasets, encoder)
    ckpt = projector_to_checkpoint(
        state.projector,
        head,
        {
            "config": run_config.as_dict(),
            "seed": run_config.align.seed,
            "domains": [ds.domain for ds in datasets],
            "step": state.step,
            "encoder_fingerprint": param_fingerprint(encoder.params),
        },
    )
    save_checkpoint(ckpt, args.out)
    export_metrics([row.as_tuple() for row in state.metrics], args.metrics)
    _echo({"steps": state.step, "metrics_rows": len(state.metrics)})
    return 0


def _cmd_eval(args) -> int:
    _echo(
        {
            "command": "eval",
            "encoder": args.encoder,
            "projector": args.projector,
            "data": args.data,
            "mode": args.mode,
            "pool": args.pool,
            "seed": args.seed,
            "split": args.split,
        }
    )
    datasets = _discover_datasets(args.data)
    encoder, adapter = encoder_from_checkpoint(load_checkpoint(args.encoder))
    results: dict[str, dict] = {}
    if args.mode == "retrieval":
        rng = np.random.default_rng(args.seed)
        for ds in datasets:
            recall1, recall5 = evaluate_retrieval(encoder, ds, args.pool, rng, adapter)
            results[ds.domain] = {"recall_at_1": recall1, "recall_at_5": recall5}
    else:
        if args.projector is None:
            raise _UsageError("eval: error: --projector is required for classification mode")
        projector, head = projector_from_checkpoint(load_checkpoint(args.projector))
        skipped = []
        for ds in datasets:
            if ds.domain not in head.instructions:
                skipped.append(ds.domain)
                continue
            accuracy, macro_f1 = evaluate_classification(
                encoder, projector, head, ds, split=args.split
            )
            results[ds.domain] = {"accuracy": accuracy, "macro_f1": macro_f1}
        if skipped:
            results["skipped_domains"] = skipped
    _echo({"results": results})
    return 0


def _cmd_gradcheck(args) -> int:
    _echo({"command": "gradcheck", "seed": args.seed, "trials": args.trials})
    results = run_gradcheck(args.seed, args.trials)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{r.name:<22} trials={r.trials:<4d} "
            f"max_rel_error={r.max_rel_error:.3e} tol={GRADCHECK_TOLERANCE:.0e} {status}"
        )
    if all(r.passed for r in results):
        return 0
    print("gradient check FAILED", file=sys.stderr)
    return 3


def _cmd_report(args) -> int:
    _echo({"command": "report", "metrics": args.metrics, "out": args.out})
    rows = parse_metrics(args.metrics)
    os.makedirs(args.out, exist_ok=True)
    by_domain: dict[str, list] = {}
    for step, domain, loss, grad_norm, smoothed, weight in rows:
        by_domain.setdefault(domain, []).append((step, loss, grad_norm, smoothed, weight))
    files = []
    for domain in sorted(by_domain):
        path = os.path.join(args.out, f"trajectory_{domain}.csv")
        lines = ["step,loss,grad_norm,smoothed,weight"]
        for step, loss, grad_norm, smoothed, weight in by_domain[domain]:
            lines.append(
                ",".join(
                    [str(step)]
                    + [format_float(v) for v in (loss, grad_norm, smoothed, weight)]
                )
            )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        files.append(path)
    _echo({"domains": sorted(by_domain), "files": files})
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "align": _cmd_align,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except UglmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
