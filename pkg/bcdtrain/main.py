"""
main.py — command-line entry point

Usage:
    python -m bcdtrain.main train-bcd configs/toy.cfg
    python -m bcdtrain.main compare configs/mnist_desk.cfg --out runs/desk
    python -m bcdtrain.main gen-data --out data/synthetic --n 600 --d0 784
    python -m bcdtrain.main prox-check --cases 10000 --seed 7
"""
from __future__ import annotations

import argparse
import logging
import sys

from bcdtrain.config import get_settings, parse_config
from bcdtrain.errors import BcdError, ConfigError, IdxFormatError, ShapeError, UnsupportedError
from bcdtrain.experiments import gen_data, run_bcd, run_compare, run_prox_check, run_sgd

settings = get_settings()

logging.basicConfig(
    stream  = sys.stdout,
    level   = getattr(logging, settings.log_level.upper(), logging.INFO),
    format  = "%(asctime)s | %(levelname)s | %(name)s | %(message)s",
    datefmt = "%H:%M:%S",
)
logger = logging.getLogger(__name__)

EXIT_OK        = 0
EXIT_INVARIANT = 1
EXIT_USAGE     = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcdtrain", description="Block coordinate descent training for deep networks")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("train-bcd", "train with block coordinate descent"),
        ("train-sgd", "train the SGD baseline"),
        ("compare",   "run BCD and SGD on the same data and seed"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="run configuration file")
        p.add_argument("--out", default=None, help="output directory (default: output.dir or BCD_RUNS_DIR)")

    p = sub.add_parser("gen-data", help="write synthetic blobs as MNIST-style IDX files")
    p.add_argument("--out",     required=True)
    p.add_argument("--n",       type=int,   default=600)
    p.add_argument("--n-test",  type=int,   default=200)
    p.add_argument("--d0",      type=int,   default=784)
    p.add_argument("--classes", type=int,   default=10)
    p.add_argument("--spread",  type=float, default=0.1)
    p.add_argument("--seed",    type=int,   default=0)

    p = sub.add_parser("prox-check", help="compare the closed-form proximal maps with grid oracles")
    p.add_argument("--cases", type=int, default=None)
    p.add_argument("--seed",  type=int, default=None)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "prox-check":
        report = run_prox_check(args.cases, args.seed)
        for suite in report.suites:
            if not suite.passed:
                print(f"prox-check: {suite.name}: {suite.failures}/{suite.cases} cases above the oracle "
                      f"(worst gap {suite.worst_gap:.3e})", file=sys.stderr)
        return EXIT_OK if report.passed else EXIT_INVARIANT

    if args.command == "gen-data":
        gen_data(args.out, n=args.n, n_test=args.n_test, d0=args.d0, classes=args.classes,
                 spread=args.spread, seed=args.seed)
        return EXIT_OK

    cfg = parse_config(args.config)
    if args.command == "train-sgd":
        run_sgd(cfg, args.out)
        return EXIT_OK

    bcd = run_bcd(cfg, args.out) if args.command == "train-bcd" else run_compare(cfg, args.out).bcd
    if cfg.bcd.check_descent and not bcd.ok:
        print(f"{args.command}: convergence certificates failed: descent={bcd.descent_pass} "
              f"({bcd.descent_pass_count}/{bcd.epochs}) rate={bcd.rate_pass} residual={bcd.residual_pass}",
              file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def run_command(argv: list[str] | None = None) -> int:
    """Parse argv, run the subcommand and map failures to exit codes (1 invariant, 2 config/IO/unsupported input)."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        return _dispatch(args)
    except (ConfigError, IdxFormatError, UnsupportedError, ShapeError, OSError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BcdError as e:
        logger.error(f"[main] {type(e).__name__}: {e}")
        print(f"{args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
