"""Command line entry point.

    delaysched run CONFIG [--seeds N] [--out DIR] [--trace] [--threads N]
    delaysched report RESULTS_DIR

The output directory is taken from ``--out``, then ``$DELAYSCHED_OUT``, then
the config's ``out`` key. ``run`` exits with status 1 if any run broke an
invariant and 2 on configuration errors; ``report`` exits 1 if an overflow
checkpoint is flagged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from delaysched.harness.config import ConfigError, load_config, with_overrides
from delaysched.harness.experiment import run_experiments
from delaysched.harness.reports import report_directory

OUT_ENV = "DELAYSCHED_OUT"


def build_parser():
    p = argparse.ArgumentParser(prog="delaysched", description="Delay-scheduling simulations")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments in a config file")
    r.add_argument("config")
    r.add_argument("--seeds", type=int, help="override the number of seeds")
    r.add_argument("--out", help="output directory")
    r.add_argument("--trace", action="store_true", help="write per-run transcript CSVs")
    r.add_argument("--threads", type=int, default=1, help="worker processes")
    q = sub.add_parser("report", help="fit scaling exponents and overflow bands")
    q.add_argument("results_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def cmd_run(args) -> int:
    if args.seeds is not None and args.seeds < 1:
        print("error: --seeds must be >= 1", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfgs = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.environ.get(OUT_ENV) or cfgs[0].out
    cfgs = [with_overrides(c, seeds=args.seeds, out=out, trace=args.trace) for c in cfgs]
    stats = run_experiments(cfgs, threads=args.threads, out=out)
    bad = 0
    for s in stats:
        cap = "-" if s.capacity is None else s.capacity
        print(f"{s.experiment:<24} C={cap:<6} T={s.horizon:<8} regret={s.mean_regret:10.2f} "
              f"+- {s.stderr:8.2f}  overflow={s.overflow_rate:.4f}  violations={s.violations}")
        bad += s.violations
    print(f"wrote {out}/summary.csv")
    if bad:
        print(f"{bad} run(s) violated an invariant", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    try:
        scaling, overflow, flagged = report_directory(args.results_dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in scaling:
        print(f"{r['experiment']:<24} C={r['capacity'] or '-':<6} slope={r['slope']:.3f} ({r['horizons']} horizons)")
    print(f"{len(overflow)} overflow checkpoints, {flagged} flagged")
    return 1 if flagged else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        return cmd_run(args)
    return cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
