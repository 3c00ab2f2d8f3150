"""``gnn-nas`` command line: run search grids, summarize traces, export curves."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from . import space as S
from .evaluator import DEFAULT_BUDGET_BYTES, TrainConfig
from .strategies import STRATEGIES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3


class ConfigError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnn-nas", description="Architecture search for GNNs.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a (strategy x seed) grid")
    run.add_argument("--space", required=True, choices=sorted(S.SPACES))
    run.add_argument("--strategy", required=True,
                     help=f"one or more of {','.join(STRATEGIES)}, comma separated")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="GNAS-Graph file")
    src.add_argument("--synthetic", help="key=value,... over "
                     + ",".join(f"{k}={v}" for k, v in H.SYNTHETIC_DEFAULTS.items()))
    run.add_argument("--name", help="dataset label used in trace file names")
    run.add_argument("--split-last", type=int, default=None,
                     help="hold out the last N nodes: N/2 valid then N/2 test")
    run.add_argument("--iterations", type=int, default=1000)
    run.add_argument("--seeds", default="0")
    run.add_argument("--budget-bytes", type=int, default=DEFAULT_BUDGET_BYTES)
    run.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    run.add_argument("--patience", type=int, default=TrainConfig.patience)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", required=True)

    summ = sub.add_parser("summarize", help="aggregate the traces in a directory")
    summ.add_argument("dir")

    curves = sub.add_parser("curves", help="write plot-ready curve data")
    curves.add_argument("dir")
    curves.add_argument("--threshold", type=float, default=0.7)
    return p


def _spec(args) -> H.ExperimentSpec:
    strategies = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
    try:
        synthetic = H.parse_synthetic(args.synthetic) if args.synthetic is not None else None
        train = TrainConfig(max_epochs=args.max_epochs, patience=args.patience)
        return H.ExperimentSpec(space=args.space, strategies=strategies,
                                seeds=_int_list(args.seeds), iterations=args.iterations,
                                out_dir=args.out, dataset_path=args.dataset, synthetic=synthetic,
                                split_last=args.split_last, budget_bytes=args.budget_bytes,
                                train=train, dataset_name=args.name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _traces(directory: str) -> list[H.Trace]:
    if not Path(directory).is_dir():
        raise ConfigError(f"{directory} is not a directory")
    traces = H.read_traces(directory)
    if not traces:
        raise ConfigError(f"no trace files in {directory}")
    return traces


def cmd_run(args) -> int:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    spec = _spec(args)
    rows, traces = H.run_grid(spec, workers=args.workers)
    print(f"wrote {len(traces)} traces to {spec.out_dir}")
    print(H.format_summary(rows))
    return EXIT_OK


def cmd_summarize(args) -> int:
    rows = H.summarize(_traces(args.dir))
    H.write_summary(rows, Path(args.dir) / "summary.csv")
    print(H.format_summary(rows))
    print(S.micro_size_report())
    return EXIT_OK


def cmd_curves(args) -> int:
    for path in H.write_curves(_traces(args.dir), args.dir, args.threshold):
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "summarize": cmd_summarize, "curves": cmd_curves}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gnn-nas: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except H.DatasetError as exc:
        print(f"gnn-nas: dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())
