"""Command-line harness: ``latdir <subcommand> --config <path> [--seed S] [--out DIR]``.

Each subcommand runs one experiment, writes CSV artifacts plus a JSON report
into the output directory, prints one line per declared check, and exits 0
iff every check passed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import EXPERIMENTS, ExperimentConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latdir",
        description="Lattice Markov chain experiments: assumption checks, heat-kernel "
        "bounds, exit probabilities, and convergence diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in sorted(EXPERIMENTS):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: ./out/<command>)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    out_dir = Path(args.out) if args.out is not None else Path("out") / args.command
    report = EXPERIMENTS[args.command](config, out_dir)
    report_path = report.save(out_dir)
    for check in report.checks:
        status = "PASS" if check.ok else "FAIL"
        print(f"[{status}] {check.name}: {check.lhs!r} {check.op} {check.rhs!r}")
    print(f"report: {report_path}")
    print(f"{args.command}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
