"""Command-line entry point.

Subcommands: simulate, detect, bench, multisensor.  Each takes --config,
--seed, --out, --workers; bench adds --pattern and --hidden-fraction.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="TOML experiment file")
    parser.add_argument("--seed", type=int, default=None, help="override run.master_seed")
    parser.add_argument("--out", required=True, help="output CSV path")
    parser.add_argument("--workers", type=int, default=None, help="override run.workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbse",
        description="Secure state estimation experiments: simulation, detection, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("simulate", help="dump one simulated (and attacked) window"))
    _add_common(sub.add_parser("detect", help="detector/estimator comparison sweep"))
    bench = sub.add_parser("bench", help="direct vs iterative update timing")
    _add_common(bench)
    bench.add_argument(
        "--pattern", choices=["timeline", "sensor", "random"], default="timeline"
    )
    bench.add_argument("--hidden-fraction", type=float, default=0.05)
    _add_common(sub.add_parser("multisensor", help="per-cell indicator map"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.master_seed = int(args.seed)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.workers = int(args.workers)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "simulate":
            header, rows = experiments.run_simulate(cfg)
        elif args.command == "detect":
            header, rows = experiments.DETECT_HEADER, experiments.run_detect(cfg)
        elif args.command == "bench":
            pattern = experiments.BenchPattern(
                kind=args.pattern, hidden_fraction=args.hidden_fraction
            )
            header, rows = experiments.BENCH_HEADER, experiments.run_bench(cfg, pattern)
        else:
            header, rows = experiments.MULTISENSOR_HEADER, experiments.run_multisensor_map(cfg)
        experiments.write_csv(args.out, header, rows)
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
