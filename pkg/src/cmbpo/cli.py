"""Command line entry points.

    cmbpo train  --config PATH --seed N --out DIR [--algo cmbpo|cpo]
    cmbpo verify --suite boundary|lemma|identity|all --trials N --seed N --out DIR
    cmbpo report RUN_DIR [RUN_DIR ...] [--threshold X ...]
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .report import summarize_runs
from .training import train
from .verify import SUITES, run_verification


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmbpo")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", default=None, help="flat key=value config file")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", required=True, help="output run directory")
    p_train.add_argument("--algo", choices=["cmbpo", "cpo"], default=None)

    p_verify = sub.add_parser("verify", help="verify the theoretical bounds")
    p_verify.add_argument("--suite", choices=list(SUITES), default="all")
    p_verify.add_argument("--trials", type=int, default=1000)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default=None)
    p_verify.add_argument("--equal-policies", action="store_true",
                          help="force pi' = pi in the instance generator")

    p_report = sub.add_parser("report", help="summarize finished runs")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--threshold", type=float, action="append", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "train":
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.algo is not None:
            overrides["algo"] = args.algo
        config = load_config(args.config, overrides)
        out = train(config, args.out)
        print(f"run finished: {out}")
        return 0

    if args.command == "verify":
        summary = run_verification(args.suite, args.trials, args.seed,
                                   args.out, args.equal_policies)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 1 if summary["violations"] else 0

    if args.command == "report":
        print(summarize_runs(args.run_dirs, args.threshold), end="")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
