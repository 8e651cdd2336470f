"""Experiment plumbing: configured runs, trace files, rate fits and epsilon sweeps."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .driver import RunAborted, RunTrace, SolverConfig, run
from .problems import CountingProblem, get_problem
from .subsolver import SubsolverConfig
from .tensor_update import Strategy, StrategyConfig

EXIT_CODES = {"converged": 0, "budget": 2, "subsolver": 3, "diverged": 4}
THREADS_ENV = "ADAREG_THREADS"


class ShortTrace(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    problem: str
    dim: int
    p: int = 2
    strategy: str = "lazy"
    m: int = 1
    eps1: float = 1e-5
    eps2: float = 1e-4
    sigma0: Optional[float] = None  # None: the problem's suggested value
    theta1: float = 2.0
    theta2: float = 2.0
    max_iters: int = 100_000
    seed: int = 0
    inner_budget: int = 500
    subsolver: str = "auto"
    dfp_mu: float = 1e-4
    dfp_L: float = 1e4
    dfp_sigma: float = 1.0
    h_floor: float = 1e-8
    eps1_grid: tuple = ()
    out: Optional[str] = None
    audit: bool = True
    timings: bool = False

    def __post_init__(self):
        if self.p not in (2, 3):
            raise ValueError("p must be 2 or 3")
        Strategy(self.strategy)
        grid = tuple(float(e) for e in self.eps1_grid)
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ValueError("eps1 grid must be strictly decreasing")
        object.__setattr__(self, "eps1_grid", grid)

    @property
    def label(self) -> str:
        return f"{self.problem}-n{self.dim}-p{self.p}-{self.strategy}-m{self.m}-s{self.seed}"

    def build_problem(self) -> CountingProblem:
        return CountingProblem(get_problem(self.problem, self.dim))

    def solver_config(self, problem) -> SolverConfig:
        sigma0 = problem.suggested_sigma0(self.p) if self.sigma0 is None else self.sigma0
        strategy = StrategyConfig(
            kind=Strategy(self.strategy),
            m=self.m,
            dfp_mu=self.dfp_mu,
            dfp_L=self.dfp_L,
            dfp_sigma_bar=self.dfp_sigma,
            h_floor=self.h_floor,
        )
        return SolverConfig(
            p=self.p,
            sigma0=sigma0,
            theta1=self.theta1,
            theta2=self.theta2,
            eps1=self.eps1,
            eps2=self.eps2,
            max_iters=self.max_iters,
            strategy=strategy,
            subsolver=SubsolverConfig(inner_budget=self.inner_budget, method=self.subsolver),
            audit=self.audit,
            seed=self.seed,
        )

    def start(self, problem) -> np.ndarray:
        return problem.default_start(np.random.default_rng(self.seed))


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    trace: RunTrace
    wrapper_calls: dict  # tallied by the instrumented problem, 0 = objective value
    wall_time: float
    files: List[Path] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.trace.termination]

    def ledger_discrepancy(self) -> dict:
        """Per-order difference between trace-recorded and wrapper-counted oracle calls."""
        recorded = self.trace.oracle_calls()
        orders = set(recorded) | set(self.wrapper_calls)
        return {o: recorded.get(o, 0) - self.wrapper_calls.get(o, 0) for o in sorted(orders)}

    def summary_row(self) -> dict:
        last = self.trace.records[-1] if self.trace.records else {}
        calls = self.trace.oracle_calls()
        s = self.spec
        return {
            "label": s.label,
            "problem": s.problem,
            "dim": s.dim,
            "p": s.p,
            "strategy": s.strategy,
            "m": s.m,
            "seed": s.seed,
            "eps1": s.eps1,
            "eps2": s.eps2,
            "termination": self.trace.termination,
            "iterations": self.trace.iterations,
            "grad_norm": last.get("grad_norm"),
            "chi": last.get("chi"),
            "beta": last.get("beta"),
            "sigma": last.get("sigma"),
            "calls_grad": calls.get(1, 0),
            "calls_hess": calls.get(2, 0),
            "calls_order_p_minus_1": calls.get(s.p - 1, 0),
            "calls_order_p": calls.get(s.p, 0),
        }


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def run_experiment(spec: ExperimentSpec, out_dir=None) -> ExperimentResult:
    """Run one configured experiment; write ``<label>.jsonl`` and ``<label>.csv`` when an output directory is set."""
    problem = spec.build_problem()
    cfg = spec.solver_config(problem)
    t0 = time.perf_counter()
    try:
        trace = run(problem, spec.start(problem), cfg)
    except RunAborted as exc:
        trace = exc.trace
    result = ExperimentResult(spec, trace, dict(problem.calls), time.perf_counter() - t0)
    out_dir = out_dir if out_dir is not None else spec.out
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jsonl = out / f"{spec.label}.jsonl"
        trace.to_jsonl(jsonl, timings=spec.timings)
        summary = out / f"{spec.label}.csv"
        write_summary_csv(summary, [result.summary_row()])
        result.files = [jsonl, summary]
    return result


# ---------------------------------------------------------------- rate fits


def mann_kendall_s(values: Sequence[float], rtol: float = 1e-12) -> int:
    """Mann-Kendall statistic ``S = sum_{i<j} sign(x_j - x_i)``; positive means an upward trend.

    Pairs that differ by at most ``rtol`` relative to the larger magnitude count
    as ties, so rounding noise in a flat sequence does not register as a trend.
    """
    x = np.asarray(values, dtype=float)
    diff = x[None, :] - x[:, None]
    scale = np.maximum(np.abs(x)[None, :], np.abs(x)[:, None])
    sign = np.where(np.abs(diff) <= rtol * scale, 0.0, np.sign(diff))
    return int(np.sum(sign[np.triu_indices(len(x), k=1)]))


def loglog_slope(k: np.ndarray, v: np.ndarray) -> float:
    """Least-squares slope of ``log v`` against ``log k``; zero entries are dropped."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    keep = (k > 0) & (v > 0)
    if np.count_nonzero(keep) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(k[keep]), np.log(v[keep]), 1)
    return float(slope)


def running_min(values: Sequence[Optional[float]]) -> np.ndarray:
    v = np.array([np.inf if x is None else x for x in values], dtype=float)
    return np.minimum.accumulate(v)


@dataclass(frozen=True)
class RateReport:
    p: int
    n_records: int
    tail_start: int
    grad_slope: float  # log-log slope of min_{j<=k} ||g_j|| against k on the tail
    grad_bound_stat: float  # sup_k min_{j<=k} ||g_j|| * k^(p/(p+1))
    grad_trend: int  # Mann-Kendall S of the scaled running minimum on the tail
    curv_slope: float
    curv_bound_stat: float  # same with exponent (p-1)/(p+1) and the curvature measure
    curv_trend: int
    curvature_key: str
    iteration_exponent: Optional[float] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def fit_rates(
    trace: RunTrace,
    p: int,
    tail_fraction: float = 0.5,
    min_length: int = 50,
    curvature_key: str = "beta",
) -> RateReport:
    """Empirical decay rates of the running minima of ``||g||`` and of the curvature measure.

    Index ``k`` counts from 1 so that ``k^a`` is defined at the first record.
    Slopes and trend statistics use the last ``tail_fraction`` of the trace.
    Falls back to ``chi`` when the trace has no ``beta`` column.
    """
    recs = trace.records
    if len(recs) < min_length:
        raise ShortTrace(f"trace has {len(recs)} records, need at least {min_length}")
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    if all(r.get(curvature_key) is None for r in recs):
        curvature_key = "chi"
    k = np.arange(1, len(recs) + 1, dtype=float)
    g = running_min([r["grad_norm"] for r in recs])
    c = running_min([r.get(curvature_key) for r in recs])
    start = min(int(math.floor(len(recs) * (1.0 - tail_fraction))), len(recs) - 2)
    qg = g * k ** (p / (p + 1))
    qc = c * k ** ((p - 1) / (p + 1))
    tail = slice(start, None)
    return RateReport(
        p=p,
        n_records=len(recs),
        tail_start=start,
        grad_slope=loglog_slope(k[tail], g[tail]),
        grad_bound_stat=float(np.max(qg)),
        grad_trend=mann_kendall_s(qg[tail]),
        curv_slope=loglog_slope(k[tail], c[tail]),
        curv_bound_stat=float(np.max(qc)),
        curv_trend=mann_kendall_s(qc[tail]),
        curvature_key=curvature_key,
    )


# ------------------------------------------------------------------ sweeps


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, min(4, os.cpu_count() or 1))


def map_ordered(fn, items: Sequence, threads: Optional[int] = None) -> list:
    """``[fn(x) for x in items]`` across worker threads, results in input order."""
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SweepRow:
    eps1: float
    iterations: int
    termination: str
    calls: dict  # order -> count
    flagged: bool  # run did not converge

    def as_dict(self, p: int) -> dict:
        return {
            "eps1": self.eps1,
            "iterations": self.iterations,
            "termination": self.termination,
            "flagged": self.flagged,
            "calls_grad": self.calls.get(1, 0),
            "calls_hess": self.calls.get(2, 0),
            "calls_order_p_minus_1": self.calls.get(p - 1, 0),
            "calls_order_p": self.calls.get(p, 0),
        }


@dataclass
class SweepResult:
    spec: ExperimentSpec
    rows: List[SweepRow]
    exponent: float  # slope of log(iterations + 1) against log(1/eps1)

    def table(self) -> List[dict]:
        return [r.as_dict(self.spec.p) for r in self.rows]


def iteration_exponent(eps: Sequence[float], iterations: Sequence[int]) -> float:
    """Least-squares slope of ``log(iterations + 1)`` against ``log(1/eps)``."""
    x = np.log(1.0 / np.asarray(eps, dtype=float))
    y = np.log(np.asarray(iterations, dtype=float) + 1.0)
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def sweep_epsilon(spec: ExperimentSpec, threads: Optional[int] = None, out_dir=None) -> SweepResult:
    """Run ``spec`` once per ``eps1`` in its grid and fit the iteration exponent."""
    grid = spec.eps1_grid
    if len(grid) < 4:
        raise ValueError("an epsilon sweep needs at least 4 grid points")
    specs = [replace(spec, eps1=e, eps1_grid=()) for e in grid]
    results = map_ordered(lambda s: run_experiment(s, out_dir=None), specs, threads)
    rows = [
        SweepRow(
            eps1=s.eps1,
            iterations=r.trace.iterations,
            termination=r.trace.termination,
            calls=r.trace.oracle_calls(),
            flagged=r.trace.termination != "converged",
        )
        for s, r in zip(specs, results)
    ]
    sweep = SweepResult(spec, rows, iteration_exponent(grid, [r.iterations for r in rows]))
    out_dir = out_dir if out_dir is not None else spec.out
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out / f"{spec.label}-sweep.csv", sweep.table())
    return sweep


CORPUS_DIMS = {"quadratic": 10, "quartic": 10, "rosenbrock": 2, "trig": 10}
CORPUS_STRATEGIES = ("lazy", "fd", "psb-lazy", "psb-fd", "dfp-fd")


def corpus_specs(p: int = 2, max_iters: int = 5000, **overrides) -> List[ExperimentSpec]:
    """The smoke corpus: every built-in problem under every strategy (``m = 1`` for lazy, 5 otherwise)."""
    eps1, eps2 = (1e-5, 1e-4) if p == 2 else (1e-4, 1e-3)
    specs = []
    for name, dim in CORPUS_DIMS.items():
        if p == 3:
            dim = min(dim, 4)
        for strat in CORPUS_STRATEGIES:
            m = 1 if strat == "lazy" else 5
            kw = dict(problem=name, dim=dim, p=p, strategy=strat, m=m, eps1=eps1, eps2=eps2, max_iters=max_iters)
            kw.update(overrides)
            specs.append(ExperimentSpec(**kw))
    return specs
