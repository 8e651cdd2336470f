"""Command-line front end: ``solve``, ``sweep`` and ``report``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .driver import RunTrace
from .harness import (
    EXIT_CODES,
    ExperimentSpec,
    ShortTrace,
    fit_rates,
    run_experiment,
    sweep_epsilon,
)
from .problems import available_problems
from .tensor_update import Strategy


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _add_run_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--problem", required=True, choices=available_problems())
    ap.add_argument("--dim", type=int, required=True)
    ap.add_argument("--p", type=int, default=2, choices=(2, 3))
    ap.add_argument("--strategy", default="lazy", choices=[s.value for s in Strategy])
    ap.add_argument("--m", type=int, default=1)
    ap.add_argument("--eps1", type=float, default=1e-5)
    ap.add_argument("--eps2", type=float, default=1e-4)
    ap.add_argument("--sigma0", type=float, default=None, help="default: the problem's suggested value")
    ap.add_argument("--theta1", type=float, default=2.0)
    ap.add_argument("--theta2", type=float, default=2.0)
    ap.add_argument("--max-iters", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for trace and summary files")
    ap.add_argument("--inner-budget", type=int, default=500)
    ap.add_argument("--subsolver", default="auto", choices=("auto", "exact-secular", "inner-descent"))
    ap.add_argument("--dfp-mu", type=float, default=1e-4)
    ap.add_argument("--dfp-L", type=float, default=1e4)
    ap.add_argument("--dfp-sigma", type=float, default=1.0)
    ap.add_argument("--h-floor", type=float, default=1e-8)
    ap.add_argument("--no-audit", action="store_true", help="skip condition and curvature audits")
    ap.add_argument("--timings", action="store_true", help="include wall times in the trace")


def _spec_from(args, eps1_grid=()) -> ExperimentSpec:
    return ExperimentSpec(
        problem=args.problem,
        dim=args.dim,
        p=args.p,
        strategy=args.strategy,
        m=args.m,
        eps1=args.eps1,
        eps2=args.eps2,
        sigma0=args.sigma0,
        theta1=args.theta1,
        theta2=args.theta2,
        max_iters=args.max_iters,
        seed=args.seed,
        inner_budget=args.inner_budget,
        subsolver=args.subsolver,
        dfp_mu=args.dfp_mu,
        dfp_L=args.dfp_L,
        dfp_sigma=args.dfp_sigma,
        h_floor=args.h_floor,
        eps1_grid=eps1_grid,
        out=args.out,
        audit=not args.no_audit,
        timings=args.timings,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adareg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the solver once")
    _add_run_args(solve)

    sweep = sub.add_parser("sweep", help="run once per eps1 value and fit the iteration exponent")
    _add_run_args(sweep)
    sweep.add_argument("--eps1-grid", type=_float_list, required=True, help="strictly decreasing, e.g. 1e-2,1e-3,1e-4,1e-5")

    report = sub.add_parser("report", help="rate statistics of a stored trace")
    report.add_argument("--trace", required=True)
    report.add_argument("--fit-tail-fraction", type=float, default=0.5)
    report.add_argument("--min-length", type=int, default=50)
    return ap


def _cmd_solve(args) -> int:
    result = run_experiment(_spec_from(args))
    row = result.summary_row()
    print(json.dumps(row, sort_keys=True))
    if result.trace.message:
        print(result.trace.message, file=sys.stderr)
    return result.exit_code


def _cmd_sweep(args) -> int:
    sweep = sweep_epsilon(_spec_from(args, eps1_grid=args.eps1_grid))
    for row in sweep.table():
        print(json.dumps(row, sort_keys=True))
    print(json.dumps({"iteration_exponent": sweep.exponent}))
    return 0 if not any(r.flagged for r in sweep.rows) else 1


def _cmd_report(args) -> int:
    trace = RunTrace.from_jsonl(args.trace)
    p = int(trace.config["p"])
    out = {"termination": trace.termination, "iterations": trace.iterations, "oracle_calls": trace.oracle_calls()}
    try:
        out["rates"] = fit_rates(trace, p, tail_fraction=args.fit_tail_fraction, min_length=args.min_length).as_dict()
    except ShortTrace as exc:
        out["rates"] = None
        print(f"rates skipped: {exc}", file=sys.stderr)
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"solve": _cmd_solve, "sweep": _cmd_sweep, "report": _cmd_report}[args.command]
    try:
        return handler(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


__all__ = ["EXIT_CODES", "build_parser", "main"]
