"""Command-line entry point.

Exit codes: 0 when every check passes, 1 on a suite failure or runtime error,
2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, load_config


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repdiff", description="Representation-enhanced diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("verify", "run the exact discrete and closed-form verification suites"),
        ("train", "train the (run x seed) grid"),
        ("sample", "draw samples from trained checkpoints"),
        ("eval", "recompute metrics from trained checkpoints"),
        ("tvscaling", "1D TV-versus-step-size experiment"),
        ("gradcheck", "finite-difference checks of every loss"),
        ("bound", "print the three TV bound terms"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--workers", type=int, default=1, help="worker processes for the run grid")
        s.add_argument("--seed-offset", type=int, default=0, help="added to every sweep seed")
        if name == "sample":
            s.add_argument("--count", type=int, default=None, help="samples per run")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return 2
    out = args.out
    try:
        if args.command == "verify":
            report, _ = harness.cmd_verify(cfg, out)
            ok = report["passed"]
        elif args.command == "train":
            report, _ = harness.cmd_train(cfg, out, args.workers, args.seed_offset)
            ok = True
        elif args.command == "sample":
            report = harness.cmd_sample(cfg, out, args.count, args.seed_offset)
            ok = True
        elif args.command == "eval":
            report = harness.cmd_eval(cfg, out, args.seed_offset)
            ok = report["reproduces_train"]
        elif args.command == "tvscaling":
            report = harness.cmd_tvscaling(cfg, out)
            ok = report["passed"]
        elif args.command == "gradcheck":
            report = harness.cmd_gradcheck(cfg, out)
            ok = report["passed"]
        else:
            report = harness.cmd_bound(cfg)
            ok = True
    except (ValueError, FileNotFoundError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.command == "bound":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(json.dumps(_headline(report), sort_keys=True))
    return 0 if ok else 1


def _headline(report: dict) -> dict:
    keys = ("command", "config_hash", "passed", "max_rel_err", "median_sliced_wasserstein", "reproduces_train",
            "verdicts", "count")
    return {k: report[k] for k in keys if k in report}


if __name__ == "__main__":
    sys.exit(main())
