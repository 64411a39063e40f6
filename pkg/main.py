"""
Stein Local Bounds - Main Entry Point
Command-line surface: bounds, distance, rate, verify and report subcommands.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from config import config
from database import get_db
from errors import BoundsError, UsageError
from logger import log_error, log_info
from runner import format_report, load_experiment, run, run_rate_study, run_verify

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_ERROR = 3


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--replicates", type=int, help="override the replicate count")
    parser.add_argument("-t", "--threads", type=int, help="worker threads for replicate blocks")
    parser.add_argument("--out", help="output directory for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stein-bounds",
        description="Normal approximation bounds for sums of locally dependent variables",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    bounds = subparsers.add_parser("bounds", help="evaluate theorem bounds and dominance verdicts")
    _add_common(bounds)

    distance = subparsers.add_parser("distance", help="Kolmogorov distance (and profile) only")
    _add_common(distance)

    rate = subparsers.add_parser("rate", help="distance along a size ladder and its log-log slope")
    _add_common(rate)

    verify = subparsers.add_parser("verify", help="moment inequalities, concentration and Stein suites")
    _add_common(verify)

    report = subparsers.add_parser("report", help="print a stored report or the run history")
    report.add_argument("path", nargs="?", help="JSON report written by a previous run")
    report.add_argument("--history", action="store_true", help="list recent runs from the ledger")
    report.add_argument("--limit", type=int, default=20)
    return parser


def _load(args: argparse.Namespace):
    cfg = load_experiment(args.config)
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.replicates is not None:
        overrides['replicates'] = args.replicates
    if args.out is not None:
        overrides['out_dir'] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("must be >= 1", "--threads")
        config.threads = args.threads
    return cfg


def _report(args: argparse.Namespace) -> int:
    if args.history:
        for record in get_db().get_recent_runs(args.limit):
            row = record.to_dict()
            print(f"{row['timestamp']}  {row['command']:<8} {row['config_hash']}  "
                  f"{row['theorem'] or '-':>10}  ks={row['ks']}  bound={row['bound']}  {row['verdict'] or ''}")
        for fit in get_db().get_rate_fits(args.limit):
            print(f"{fit.timestamp.isoformat()}  rate     {fit.config_hash}  {fit.model_kind}  "
                  f"slope={fit.slope:.4f} [{fit.slope_low:.4f}, {fit.slope_high:.4f}]")
        return EXIT_PASS
    if not args.path:
        raise UsageError("give a report path or --history", "path")
    try:
        doc = json.loads(Path(args.path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such file {args.path}", "path")
    print(format_report(doc))
    return EXIT_PASS if doc.get('passed', True) else EXIT_FAIL


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        return _report(args)

    cfg = _load(args)
    log_info("=" * 60)
    log_info(f"  {config.software_version} | {args.command}")
    log_info("=" * 60)
    log_info(f"Model: {cfg.model.get('kind')} | seed {cfg.seed} | replicates {cfg.replicates} | "
             f"threads {config.threads}")

    if args.command == "bounds":
        report = run(cfg, command="bounds")
    elif args.command == "distance":
        report = run(replace(cfg, theorems=[]), command="distance")
    elif args.command == "rate":
        report = run_rate_study(cfg)
    else:
        report = run_verify(cfg)

    print(format_report(report.to_dict()))
    return report.exit_status


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point."""
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except UsageError as e:
        log_error(f"Usage error: {e}")
        return EXIT_USAGE
    except BoundsError as e:
        log_error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
