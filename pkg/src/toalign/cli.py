"""``toalign`` command line: run, gen-data, check, viz."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .autodiff import ConfigError

log = logging.getLogger("toalign")


def _setup_logging() -> None:
    level = os.environ.get("TOALIGN_LOG", "info").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _load(args) -> harness.ExperimentMatrix:
    matrix = harness.load_config(args.config)
    if getattr(args, "seed_override", None) is not None:
        matrix.seeds = [args.seed_override]
    return matrix


def cmd_run(args) -> int:
    matrix = _load(args)
    out = Path(args.out) if args.out else matrix.out
    code = harness.run(matrix, out, jobs=args.jobs, config_text=Path(args.config).read_text())
    print(f"results: {out / 'results.csv'}")
    print((out / "results.csv").read_text(), end="")
    return code


def cmd_gen_data(args) -> int:
    matrix = _load(args)
    for p in harness.gen_data(matrix, Path(args.out) if args.out else None):
        print(p)
    return 0


def cmd_check(args) -> int:
    from .gradcheck import INVARIANT_TOL, decomposition_invariants, run_all

    ok = run_all(seeds=range(args.seeds))
    for name, err in decomposition_invariants(args.trials).items():
        passed = err <= INVARIANT_TOL[name]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  decomposition {name:<16s} worst {err:.2e} (tol {INVARIANT_TOL[name]:.0e})")
    return 0 if ok else 1


def cmd_viz(args) -> int:
    return harness.viz(args.run_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toalign", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train every (method, seed) cell of a config")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="output directory (overrides [experiment] out)")
    p.add_argument("--seed-override", type=int, help="run only this seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-data", help="export the synthetic splits as CSV")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--seed-override", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check", help="gradient and decomposition invariant suites")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("viz", help="re-emit curves and heatmaps of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
