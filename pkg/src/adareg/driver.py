"""Outer loop: derivative refresh, tensor approximation, subsolve, unconditional step.

The objective value is never consulted for control; with auditing enabled it is
recorded in the trace next to the exact-Hessian curvature measure, both taken
from the unwrapped problem so they do not count as oracle calls.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .problems import Problem, unwrap
from .subsolver import BudgetExhausted, SubsolverConfig, minimize_model
from .taylor_model import ModelState, check_step
from .tensor_update import (
    SecantData,
    Strategy,
    StrategyConfig,
    TensorUpdate,
    condition1_audit,
    tensor_p,
)

SCHEMA = "adareg.trace/1"


@dataclass(frozen=True)
class SolverConfig:
    p: int = 2
    sigma0: float = 1.0
    theta1: float = 2.0
    theta2: float = 2.0
    eps1: float = 1e-5
    eps2: float = 1e-4
    max_iters: int = 100_000
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    subsolver: SubsolverConfig = field(default_factory=SubsolverConfig)
    audit: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("order p must be >= 2")
        if self.sigma0 <= 0.0:
            raise ValueError("sigma0 must be positive")
        if self.theta1 <= 1.0 or self.theta2 <= 1.0:
            raise ValueError("theta1 and theta2 must exceed 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"]["kind"] = self.strategy.kind.value
        return d


@dataclass(frozen=True)
class SolverState:
    k: int
    x: np.ndarray
    sigma: float
    history: Tuple[float, ...]  # last 2m-1 step norms, most recent first
    T: Optional[np.ndarray] = None  # tensor used at the previous iteration
    prev_x: Optional[np.ndarray] = None
    prev_derivs: Optional[List[np.ndarray]] = None
    prev_step: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, x0: np.ndarray, cfg: SolverConfig) -> "SolverState":
        width = 2 * cfg.strategy.m - 1
        return cls(0, np.array(x0, dtype=float), cfg.sigma0, (1.0,) * width)

    def xi(self, p: int) -> float:
        return float(sum(h ** (p + 1) for h in self.history))


class RunAborted(RuntimeError):
    """A run stopped abnormally; ``trace`` holds every completed iteration."""

    def __init__(self, message: str, reason: str, trace: "RunTrace"):
        super().__init__(message)
        self.reason = reason
        self.trace = trace


def second_order_measure(p: int, T: np.ndarray, derivs: List[np.ndarray], exact_hessian=None):
    """``(chi, beta)``: negative curvature of the model's Hessian proxy and of the true Hessian."""
    H = T if p == 2 else derivs[1]
    chi = max(0.0, -float(np.linalg.eigvalsh(H)[0]))
    beta = None
    if exact_hessian is not None:
        beta = max(0.0, -float(np.linalg.eigvalsh(exact_hessian)[0]))
    return chi, beta


def _iteration_calls(p: int, update: TensorUpdate) -> dict:
    calls = {i: 1 for i in range(1, p)}
    for order, c in update.calls.items():
        calls[order] = calls.get(order, 0) + c
    return calls


def step(problem: Problem, state: SolverState, cfg: SolverConfig) -> Tuple[SolverState, dict]:
    """One iteration.  Returns the next state and the iteration record.

    When the stopping test passes at ``state.x`` the record is marked terminal
    and the state is returned unchanged.
    """
    t0 = time.perf_counter()
    p, k, x = cfg.p, state.k, state.x
    derivs = [problem.derivative(x, i) for i in range(1, p)]
    if not all(np.all(np.isfinite(D)) for D in derivs):
        raise FloatingPointError(f"non-finite derivatives at iteration {k}")

    secant = None
    if state.prev_step is not None:
        secant = SecantData(
            state.prev_step,
            derivs[-1] - state.prev_derivs[-1],
            derivs[0] - state.prev_derivs[0],
        )
    update = tensor_p(k, state.T, secant, state.history, problem, x, p, cfg.strategy)
    T = update.T

    base = unwrap(problem)
    exact_H = derivs[1] if p >= 3 else (base.derivative(x, 2) if cfg.audit else None)
    chi, beta = second_order_measure(p, T, derivs, exact_H)
    gnorm = float(np.linalg.norm(derivs[0]))

    rec = {
        "k": k,
        "x": [float(v) for v in x],
        "f": base.value(x) if cfg.audit else None,
        "grad_norm": gnorm,
        "chi": chi,
        "beta": beta,
        "sigma": state.sigma,
        "xi": state.xi(p),
        "restart": update.restart,
        "branch": update.branch,
        "h": update.h,
        "h_floor_active": update.h_floor_active,
        "kappa_w": update.kappa_w,
        "calls": {str(o): c for o, c in sorted(_iteration_calls(p, update).items())},
    }
    if cfg.audit:
        rec["cond1"] = condition1_audit(
            update, problem, x, k, p, state.history, cfg.strategy,
            T_prev=state.T, x_prev=state.prev_x, s_prev=state.prev_step, seed=cfg.seed,
        )

    if gnorm <= cfg.eps1 and chi <= cfg.eps2:
        rec.update(terminal=True, wall_time=time.perf_counter() - t0)
        return replace(state, T=T), rec

    model = ModelState(x, derivs, T, state.sigma)
    s, cert = minimize_model(model, cfg.theta1, cfg.theta2, cfg.subsolver)
    recheck = check_step(model, s, cfg.theta1, cfg.theta2)
    if recheck.ok != cert.ok:
        raise AssertionError("subsolver certificate disagrees with the driver's re-check")

    ns = float(np.linalg.norm(s))
    x_new = x + s
    if not np.all(np.isfinite(x_new)):
        raise FloatingPointError(f"non-finite iterate after iteration {k}")
    sigma_new = state.sigma + state.sigma * ns ** (p + 1)
    width = 2 * cfg.strategy.m - 1
    history = ((ns,) + state.history)[:width]

    rec.update(
        terminal=False,
        step_norm=ns,
        sigma_next=sigma_new,
        model_decrease=recheck.model_decrease,
        tgrad_norm=recheck.grad_norm,
        lam_min_model=recheck.lam_min_model,
        theta1_rhs=recheck.theta1_rhs,
        theta2_rhs=recheck.theta2_rhs,
        decrease_ok=recheck.decrease_ok,
        theta1_ok=recheck.theta1_ok,
        theta2_ok=recheck.theta2_ok,
        wall_time=time.perf_counter() - t0,
    )
    new_state = SolverState(
        k=k + 1,
        x=x_new,
        sigma=sigma_new,
        history=history,
        T=T,
        prev_x=x,
        prev_derivs=derivs,
        prev_step=s,
    )
    return new_state, rec


@dataclass
class RunTrace:
    problem: str
    dim: int
    config: dict
    records: List[dict] = field(default_factory=list)
    termination: str = "running"  # converged | budget | subsolver | diverged
    message: str = ""
    x_final: Optional[List[float]] = None

    @property
    def iterations(self) -> int:
        """Number of steps taken."""
        return sum(1 for r in self.records if not r.get("terminal"))

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.records]

    def oracle_calls(self) -> dict:
        total: dict = {}
        for r in self.records:
            for o, c in r["calls"].items():
                total[int(o)] = total.get(int(o), 0) + c
        return dict(sorted(total.items()))

    def header(self) -> dict:
        return {"type": "header", "schema": SCHEMA, "problem": self.problem, "dim": self.dim, "config": self.config}

    def footer(self) -> dict:
        return {
            "type": "summary",
            "schema": SCHEMA,
            "termination": self.termination,
            "message": self.message,
            "iterations": self.iterations,
            "oracle_calls": {str(k): v for k, v in self.oracle_calls().items()},
            "x_final": self.x_final,
        }

    def to_jsonl(self, path, timings: bool = False) -> None:
        """Header line, one line per iteration, summary line.  Wall times only with ``timings``."""
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for r in self.records:
                row = dict(r, type="iter")
                if not timings:
                    row.pop("wall_time", None)
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps(self.footer(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunTrace":
        header, records, footer = None, [], {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            kind = row.pop("type", "iter")
            if kind == "header":
                header = row
            elif kind == "summary":
                footer = row
            else:
                records.append(row)
        if header is None:
            raise ValueError(f"{path}: missing trace header")
        if header.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported schema {header.get('schema')!r}")
        return cls(
            problem=header["problem"],
            dim=header["dim"],
            config=header["config"],
            records=records,
            termination=footer.get("termination", "unknown"),
            message=footer.get("message", ""),
            x_final=footer.get("x_final"),
        )


def _update_running_minima(rec: dict, prev: Optional[dict]) -> None:
    for key in ("grad_norm", "chi", "beta"):
        val = rec.get(key)
        best = None if prev is None else prev.get(f"min_{key}")
        if val is None:
            rec[f"min_{key}"] = best
        else:
            rec[f"min_{key}"] = val if best is None else min(best, val)


def run(problem: Problem, x0: np.ndarray, cfg: SolverConfig, raise_on_error: bool = True) -> RunTrace:
    """Iterate until ``||g|| <= eps1`` and ``chi <= eps2`` or ``max_iters`` steps are taken."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({problem.dim},)")
    trace = RunTrace(problem=problem.name, dim=problem.dim, config=cfg.to_dict())
    state = SolverState.initial(x0, cfg)
    prev = None
    try:
        while state.k < cfg.max_iters:
            state, rec = step(problem, state, cfg)
            _update_running_minima(rec, prev)
            trace.records.append(rec)
            prev = rec
            if rec["terminal"]:
                trace.termination = "converged"
                break
        else:
            trace.termination = "budget"
    except BudgetExhausted as exc:
        trace.termination, trace.message = "subsolver", str(exc)
    except FloatingPointError as exc:
        trace.termination, trace.message = "diverged", str(exc)
    trace.x_final = [float(v) for v in state.x]
    if raise_on_error and trace.termination in ("subsolver", "diverged"):
        raise RunAborted(trace.message, trace.termination, trace)
    return trace


def sigma_recurrence_error(trace: RunTrace, p: int) -> float:
    """Largest relative deviation from ``sigma_{k+1} = sigma_k (1 + ||s_k||^(p+1))``."""
    worst = 0.0
    for r in trace.records:
        if r.get("terminal"):
            continue
        expected = r["sigma"] * (1.0 + r["step_norm"] ** (p + 1))
        worst = max(worst, abs(r["sigma_next"] - expected) / expected)
    return worst


def default_strategy_for(kind: str, m: int = 1, **kwargs) -> StrategyConfig:
    return StrategyConfig(kind=Strategy(kind), m=m, **kwargs)


def x_distance(a, b) -> float:
    return math.dist(a, b)
