"""Command-line entry point.

Subcommands: gradcheck, pool, synth, train, ablate, convergence, report.
Exit codes: 0 on success, 1 on runtime or check failure, 2 on bad
configuration or unusable input files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import generate, save_dataset
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    SparsePoolError,
    TrainingDivergedError,
)
from .gradcheck import SCOPES, run_suite
from .harness import (
    RunConfig,
    cmd_train_run,
    load_config,
    render_report,
    run_ablation,
    run_convergence,
    synth_spec_from_config,
)
from .pooling import PoolMode, Schedule, pool_forward
from .tensor import read_spt4, write_spt4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsepool",
        description="Pooling operators and the crop-pooling experiment harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=SCOPES, default="all")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pool", help="pool a stored tensor file to channel features")
    p.add_argument("input", help="SPT4 tensor file, shape (n, c, h, w)")
    p.add_argument("--mode", default="outlier",
                   choices=("avg", "max", "outlier", "dynamic"))
    p.add_argument("--lambda", dest="lam", type=float, default=2.0,
                   help="threshold multiplier for outlier modes")
    p.add_argument("--epoch", type=int, default=None,
                   help="current epoch for the dynamic schedule")
    p.add_argument("--total-epochs", type=int, default=None,
                   help="total epochs for the dynamic schedule")
    p.add_argument("--mask-out", default=None,
                   help="write the selection mask to this SPT4 file")

    p = sub.add_parser("synth", help="generate a synthetic dataset folder")
    p.add_argument("--config", default=None, help="run config (its [data] section)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="png", choices=("png", "spt4"))

    p = sub.add_parser("train", help="train one model from a config")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("ablate", help="run the 3x3 architecture/pooling grid")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("convergence", help="dynamic vs static outlier curves")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("report", help="aggregate result JSONs into markdown")
    p.add_argument("results_dir")
    return parser


def _load_run_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "lam", None) is not None:
        config = dataclasses.replace(
            config, pool=dataclasses.replace(config.pool, lam=args.lam))
    return config


def _cmd_gradcheck(args):
    report = run_suite(scope=args.scope, trials=args.trials, seed=args.seed)
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


def _cmd_pool(args):
    x = read_spt4(args.input)
    mode = PoolMode.parse(args.mode, args.lam)
    schedule = None
    if mode.needs_schedule:
        if args.epoch is None or args.total_epochs is None:
            raise ConfigurationError(
                "dynamic mode requires --epoch and --total-epochs"
            )
        schedule = Schedule(args.epoch, args.total_epochs)
    feats, ctx = pool_forward(x, mode, schedule)
    writer = csv.writer(sys.stdout)
    for row in feats:
        writer.writerow([repr(float(v)) for v in row])
    if args.mask_out:
        if ctx.mask is None:
            raise ConfigurationError(
                "--mask-out requires the outlier or dynamic mode"
            )
        write_spt4(args.mask_out, ctx.mask.astype(np.float32))
    return 0


def _cmd_synth(args):
    config = load_config(args.config) if args.config else RunConfig()
    spec = synth_spec_from_config(config.data)
    dataset = generate(spec)
    index = save_dataset(dataset, args.out, image_format=args.format)
    train_n = len(index.split_records("train"))
    test_n = len(index.split_records("test"))
    print(f"wrote {train_n} train / {test_n} test images "
          f"({len(index.classes)} classes) to {args.out}")
    return 0


def _cmd_train(args):
    config = _load_run_config(args)
    result = cmd_train_run(config, args.out)
    print(f"{result.label}: test accuracy {result.test_accuracy:.4f}, "
          f"final train loss {result.train_loss[-1]:.4f}, "
          f"{result.wall_clock_seconds:.1f}s")
    print(f"artifacts in {args.out} (model.spck, result.json)")
    return 0


def _cmd_ablate(args):
    config = _load_run_config(args)

    def progress(job, outcome):
        kind, mode, cell = job
        status = "ok" if not isinstance(outcome[2], str) else "FAILED"
        print(f"  {kind}-{mode} seed {cell.train.seed}: {status}",
              file=sys.stderr)

    grid = run_ablation(config, args.out, seeds=args.seeds, progress=progress)
    table_path = Path(args.out) / "ablation.md"
    print(table_path.read_text())
    failures = sum(
        1 for outcomes in grid.values() for o in outcomes if isinstance(o, str)
    )
    if failures:
        print(f"{failures} cell run(s) failed; see ablation.csv", file=sys.stderr)
        return 1
    return 0


def _cmd_convergence(args):
    config = _load_run_config(args)
    results, stats = run_convergence(config, args.out, seeds=args.seeds)
    for variant in ("dynamic", "outlier"):
        finals = [r.train_accuracy[-1] for r in results[variant]]
        print(f"{variant}: epochs to 90% of final accuracy = {stats[variant]}, "
              f"final train accuracy {np.mean(finals):.4f}")
    print(f"curves in {args.out} (convergence.csv, convergence.svg)")
    return 0


def _cmd_report(args):
    text, warnings = render_report(args.results_dir)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(text)
    report_path = Path(args.results_dir) / "report.md"
    report_path.write_text(text if text.endswith("\n") else text + "\n")
    return 0


_HANDLERS = {
    "gradcheck": _cmd_gradcheck,
    "pool": _cmd_pool,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "convergence": _cmd_convergence,
    "report": _cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except TrainingDivergedError as exc:
        print(json.dumps(exc.diagnostic()), file=sys.stderr)
        return 1
    except (ConfigurationError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SparsePoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
