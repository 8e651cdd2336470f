"""Strategies producing the approximate p-th order tensor at each iteration.

Every ``m`` iterations the tensor is refreshed (exactly, or by forward
differences of the order-(p-1) derivative).  In between it is either kept
constant or corrected by a least-change secant update in a weighted
Frobenius norm: the identity weight gives PSB, a weight ``W`` with
``W^{-2} s = y`` gives DFP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .problems import Problem, unwrap
from .tensor_core import (
    WeightMatrix,
    apply_matrix,
    contract,
    frob_norm,
    op_norm,
    sym_basis,
    sym_project,
)


ROUNDING_ALLOWANCE = 1e-10  # absolute slack on the restart audit bound


class Strategy(str, Enum):
    LAZY = "lazy"
    FD = "fd"
    PSB_LAZY = "psb-lazy"
    PSB_FD = "psb-fd"
    DFP_FD = "dfp-fd"

    @property
    def fd_restart(self) -> bool:
        return self in (Strategy.FD, Strategy.PSB_FD, Strategy.DFP_FD)


class DegenerateStep(ValueError):
    """The previous step is too short for a secant update."""


class GuardViolated(ValueError):
    """(s, y) fail the curvature/Lipschitz guard needed to build a DFP weight."""


@dataclass(frozen=True)
class StrategyConfig:
    kind: Strategy = Strategy.LAZY
    m: int = 1
    L_hat: Optional[float] = None  # Lipschitz estimate for the FD error bound; None = problem's declared value
    dfp_mu: float = 1e-4
    dfp_L: float = 1e4
    dfp_sigma_bar: float = 1.0
    h_floor: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if self.m < 1:
            raise ValueError("restart period m must be >= 1")
        if not (0.0 < self.dfp_mu <= self.dfp_L):
            raise ValueError("need 0 < dfp_mu <= dfp_L")
        if self.dfp_sigma_bar <= 0.0:
            raise ValueError("dfp_sigma_bar must be positive")
        if self.h_floor <= 0.0:
            raise ValueError("h_floor must be positive")

    def kappa_max(self) -> float:
        return dfp_kappa_max(self.dfp_mu, self.dfp_L, self.dfp_sigma_bar)

    def kappa_C(self, p: int) -> float:
        if self.kind is Strategy.DFP_FD:
            return self.kappa_max() ** p
        return 1.0


@dataclass(frozen=True)
class SecantData:
    """Previous step and derivative differences feeding a secant update.

    ``y_tensor`` is the difference of order-(p-1) derivatives (the action of the
    averaged tensor on ``s_prev``); ``y_vec`` the gradient difference used to
    build the DFP weight.  They coincide when p = 2.
    """

    s_prev: np.ndarray
    y_tensor: np.ndarray
    y_vec: np.ndarray


@dataclass
class TensorUpdate:
    """Output of :func:`tensor_p` plus what it cost and which branch ran."""

    T: np.ndarray
    branch: str  # exact | fd | keep | psb | dfp | dfp-guard | degenerate
    restart: bool
    h: Optional[float] = None
    h_floor_active: bool = False
    kappa_w: Optional[float] = None
    weight: Optional[WeightMatrix] = None
    calls: dict = field(default_factory=dict)  # derivative order -> oracle calls


def compute_h(history: Sequence[float], m: int, n: int, h_floor: float = 1e-8) -> tuple[float, bool]:
    """Finite-difference stepsize ``min(sum of the last m step norms, 1) / sqrt(n)``.

    ``history`` lists the most recent step norm first; missing entries count as 1.
    Returns ``(h, floor_active)``.
    """
    recent = list(history[:m]) + [1.0] * max(0, m - len(history))
    h = min(float(sum(recent)), 1.0) / math.sqrt(n)
    if h < h_floor:
        return h_floor, True
    return h, False


def fd_restart(problem: Problem, x: np.ndarray, h: float, p: int) -> np.ndarray:
    """Symmetrized forward differences of the order-(p-1) derivative (n + 1 oracle calls)."""
    if h <= 0.0:
        raise ValueError("finite-difference stepsize must be positive")
    n = x.shape[0]
    base = problem.derivative(x, p - 1)
    A = np.empty((n,) * p)
    for i in range(n):
        xi = x.copy()
        xi[i] += h
        col = (problem.derivative(xi, p - 1) - base) / h
        A[..., i] = col
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("non-finite derivative values in finite-difference restart")
    return sym_project(A)


def hosu_update(
    T_prev: np.ndarray,
    s: np.ndarray,
    y_tensor: np.ndarray,
    W: Optional[WeightMatrix] = None,
) -> np.ndarray:
    """Least-change symmetric update ``argmin ||(T - T_prev)[W]^p||_F`` s.t. ``T[s] = y_tensor``.

    With ``D = T - T_prev`` and ``Dh = D[W]^p`` the problem becomes the
    minimum-Frobenius-norm symmetric ``Dh`` with ``Dh[W^{-1} s] = (y - T_prev[s])[W]^{p-1}``,
    solved through the normal equations in orthonormal symmetric coordinates.
    """
    T_prev = np.asarray(T_prev, dtype=float)
    s = np.asarray(s, dtype=float)
    p = T_prev.ndim
    n = T_prev.shape[0]
    ns = float(np.linalg.norm(s))
    if ns < 1e-14:
        raise DegenerateStep(f"secant step norm {ns:.3e} too small")

    if W is None:
        v, Winv = s, None
    else:
        Winv = W.inverse()
        v = Winv @ s
    nv = float(np.linalg.norm(v))
    u = v / nv

    E = sym_basis(n, p)
    F = sym_basis(n, p - 1)
    # columns: basis tensors contracted with u, expressed in the order-(p-1) basis
    contracted = E.reshape(n ** (p - 1), n, E.shape[1]).transpose(0, 2, 1) @ u
    A = F.T @ contracted

    T = T_prev
    for _ in range(2):  # one pass of iterative refinement
        r = np.asarray(y_tensor, dtype=float) - contract(T, s, 1)
        rhat = r if W is None else apply_matrix(r, W.matrix)
        b = F.T @ (np.atleast_1d(rhat).ravel() / nv)
        z = A.T @ np.linalg.solve(A @ A.T, b)
        Dh = (E @ z).reshape((n,) * p)
        D = Dh if W is None else apply_matrix(Dh, Winv)
        T = sym_project(T + D)
        resid = frob_norm(np.asarray(y_tensor) - contract(T, s, 1))
        if resid <= 1e-13 * (1.0 + frob_norm(y_tensor)):
            break
    return T


def dfp_guard(s: np.ndarray, y: np.ndarray, mu: float, L: float) -> bool:
    ns2 = float(s @ s)
    return mu * ns2 <= abs(float(s @ y)) and float(np.linalg.norm(y)) <= L * math.sqrt(ns2)


def dfp_kappa_max(mu: float, L: float, sigma_bar: float) -> float:
    """Upper bound on the condition number of the constructed DFP weight."""
    upper = L + (sigma_bar + L * L) / mu
    return max(
        math.sqrt(1.0 / mu),
        math.sqrt(upper) * math.sqrt(max(1.0 / sigma_bar, 1.0, (sigma_bar + L * L) / (mu * sigma_bar))),
    )


def build_dfp_weight(
    s: np.ndarray, y: np.ndarray, mu: float, L: float, sigma_bar: float
) -> tuple[WeightMatrix, float]:
    """SPD ``W`` with ``W^{-2} s = y`` (up to the sign of ``s``) and bounded condition number.

    ``A = W^{-2}`` equals the identity off ``span{s, y}``.  When ``s`` and ``y`` are
    colinear, ``A`` scales the ``s`` direction by ``s'y / ||s||^2``; otherwise it is
    the 2x2 block ``[[a, c], [c, b]]`` in the basis ``(s/||s||, y_perp/||y_perp||)``
    with ``a = s'y/||s||^2``, ``c = ||y_perp||/||s||`` and ``b = (sigma_bar + c^2)/a``.
    Returns the weight and the a-priori bound on its condition number.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if not dfp_guard(s, y, mu, L):
        raise GuardViolated("DFP guard fails: need mu||s||^2 <= |s'y| and ||y|| <= L||s||")
    if float(s @ y) < 0.0:
        s = -s
    n = s.shape[0]
    ns = float(np.linalg.norm(s))
    v1 = s / ns
    a = float(s @ y) / ns**2
    y_perp = y - float(s @ y) * s / ns**2
    c = float(np.linalg.norm(y_perp)) / ns
    A = np.eye(n) + (a - 1.0) * np.outer(v1, v1)
    if c > 1e-12 * float(np.linalg.norm(y)) / ns:
        v2 = y_perp / float(np.linalg.norm(y_perp))
        b = (sigma_bar + c * c) / a
        A += (b - 1.0) * np.outer(v2, v2) + c * (np.outer(v1, v2) + np.outer(v2, v1))
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    W = (V / np.sqrt(w)) @ V.T
    return WeightMatrix.from_matrix(0.5 * (W + W.T)), dfp_kappa_max(mu, L, sigma_bar)


def tensor_p(
    k: int,
    T_prev: Optional[np.ndarray],
    secant: Optional[SecantData],
    history: Sequence[float],
    problem: Problem,
    x: np.ndarray,
    p: int,
    cfg: StrategyConfig,
) -> TensorUpdate:
    """Approximate p-th tensor at iteration ``k`` for the configured strategy."""
    n = x.shape[0]
    if k % cfg.m == 0:
        if cfg.kind.fd_restart:
            h, floor = compute_h(history, cfg.m, n, cfg.h_floor)
            T = fd_restart(problem, x, h, p)
            return TensorUpdate(T, "fd", True, h=h, h_floor_active=floor, calls={p - 1: n + 1})
        T = problem.derivative(x, p)
        return TensorUpdate(T, "exact", True, calls={p: 1})

    if T_prev is None:
        raise ValueError("a previous tensor is required between restarts")
    if cfg.kind in (Strategy.LAZY, Strategy.FD):
        return TensorUpdate(T_prev, "keep", False)
    if secant is None:
        raise ValueError("secant data is required for secant strategies")
    try:
        if cfg.kind is Strategy.DFP_FD:
            try:
                W, kappa = build_dfp_weight(secant.s_prev, secant.y_vec, cfg.dfp_mu, cfg.dfp_L, cfg.dfp_sigma_bar)
            except GuardViolated:
                return TensorUpdate(T_prev, "dfp-guard", False)
            T = hosu_update(T_prev, secant.s_prev, secant.y_tensor, W)
            return TensorUpdate(T, "dfp", False, kappa_w=W.cond, weight=W)
        T = hosu_update(T_prev, secant.s_prev, secant.y_tensor)
        return TensorUpdate(T, "psb", False)
    except DegenerateStep:
        return TensorUpdate(T_prev, "degenerate", False)


def averaged_tensor(problem: Problem, x_prev: np.ndarray, s_prev: np.ndarray, p: int, nodes: int = 8) -> np.ndarray:
    """Gauss-Legendre estimate of the mean of the p-th derivative over the previous step."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    acc = 0.0
    for ti, wi in zip(t, w):
        acc = acc + wi * problem.derivative(x_prev + ti * s_prev, p)
    return acc


def condition1_audit(
    update: TensorUpdate,
    problem: Problem,
    x: np.ndarray,
    k: int,
    p: int,
    history: Sequence[float],
    cfg: StrategyConfig,
    T_prev: Optional[np.ndarray] = None,
    x_prev: Optional[np.ndarray] = None,
    s_prev: Optional[np.ndarray] = None,
    seed: int = 0,
) -> dict:
    """Diagnostic check of the tensor-accuracy requirements; never alters a run.

    At restarts it compares ``T_k`` with the exact p-th derivative against
    ``min(kappa_A * sum_{i<=m} ||s_{k-i}||, kappa_B)``, where
    ``kappa_A = kappa_B = L_p/2`` for finite-difference restarts and 0 for
    exact ones (with an active stepsize floor the bound uses ``sqrt(n) h``).  The
    2-norm residual is a lower-bound estimate, so a flagged violation is certain;
    the Frobenius residual bounds it from above.  ``ROUNDING_ALLOWANCE`` absorbs
    the cancellation error of the differences when ``L_p`` is zero.

    Between restarts (when the previous point is known) it measures the
    averaged-tensor contraction factor in the update's own norm.
    """
    base = unwrap(problem)
    out: dict = {"restart": update.restart}
    if update.restart:
        R = update.T - base.derivative(x, p)
        frob = frob_norm(R)
        est = op_norm(R, seed=seed).value
        if update.branch == "fd":
            L = cfg.L_hat if cfg.L_hat is not None else base.lipschitz_constant(p)
            n = x.shape[0]
            recent = list(history[: cfg.m]) + [1.0] * max(0, cfg.m - len(history))
            reach = min(float(sum(recent)), 1.0)
            if update.h_floor_active:
                reach = math.sqrt(n) * update.h
            bound = 0.5 * L * reach
        else:
            bound = 0.0
        ok = est <= bound * 1.01 + ROUNDING_ALLOWANCE
        out.update(residual_frob=frob, residual_2_lower=est, bound=bound, ok=ok)
        return out
    if T_prev is None or x_prev is None or s_prev is None:
        return out
    Tt = averaged_tensor(base, x_prev, s_prev, p)
    if update.weight is not None:
        after = frob_norm(apply_matrix(update.T - Tt, update.weight.matrix))
        before = frob_norm(apply_matrix(T_prev - Tt, update.weight.matrix))
    else:
        after, before = frob_norm(update.T - Tt), frob_norm(T_prev - Tt)
    out.update(
        avg_residual_after=after,
        avg_residual_before=before,
        ok=after <= before * (1.0 + 1e-8) + 1e-10,
    )
    return out
