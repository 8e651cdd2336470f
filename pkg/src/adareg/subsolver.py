"""Approximate minimization of the regularized model until the step certificate holds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import optimize

from .taylor_model import (
    ModelState,
    StepCertificate,
    check_step,
    model_decrease,
    model_grad,
    model_hess,
)
from .tensor_core import contract


class BudgetExhausted(RuntimeError):
    """The inner loop ran out of iterations before the certificate held.

    ``s`` and ``certificate`` describe the best point found.
    """

    def __init__(self, message: str, s: np.ndarray, certificate: StepCertificate, iterations: int):
        super().__init__(message)
        self.s = s
        self.certificate = certificate
        self.iterations = iterations


@dataclass(frozen=True)
class SubsolverConfig:
    inner_budget: int = 500
    inner_tol_factor: float = 0.9
    method: str = "auto"  # "auto", "exact-secular" (p = 2 only) or "inner-descent"

    def __post_init__(self):
        if self.inner_budget < 1:
            raise ValueError("inner_budget must be >= 1")
        if not 0.0 < self.inner_tol_factor < 1.0:
            raise ValueError("inner_tol_factor must lie in (0, 1)")
        if self.method not in ("auto", "exact-secular", "inner-descent"):
            raise ValueError(f"unknown subsolver method {self.method!r}")

    def target(self, theta: float) -> float:
        """Tightened acceptance constant, strictly between 1 and ``theta``."""
        return 1.0 + self.inner_tol_factor * (theta - 1.0)


def exact_cubic_step(g: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    """Global minimizer of ``g's + s'Bs/2 + sigma/6 ||s||^3``.

    Solves ``(B + lam I) s = -g`` with ``lam = sigma ||s|| / 2`` and
    ``B + lam I`` positive semidefinite, via an eigendecomposition of ``B`` and a
    bracketed root of the secular equation.  In the hard case (``g`` orthogonal
    to the leftmost eigenspace) the step is completed along a leftmost
    eigenvector.
    """
    g = np.asarray(g, dtype=float)
    B = 0.5 * (np.asarray(B, dtype=float) + np.asarray(B, dtype=float).T)
    lam_all, Q = np.linalg.eigh(B)
    gh = Q.T @ g
    lam1 = lam_all[0]
    gnorm = float(np.linalg.norm(g))
    scale = max(1.0, float(np.max(np.abs(lam_all))))
    lo = max(0.0, -lam1)

    if gnorm == 0.0 and lam1 >= 0.0:
        return np.zeros_like(g)

    def phi(lam):
        return float(np.linalg.norm(gh / (lam_all + lam))) - 2.0 * lam / sigma

    if lam1 > 0.0:
        a = 0.0
    else:
        a = lo + 1e-15 * scale
        if not phi(a) > 0.0:
            # hard case: g has (numerically) no leftmost component
            return Q @ _complete_norm(gh, lam_all, lo, lam_all - lam1 <= 1e-12 * scale, sigma)
    b = a + math.sqrt(sigma * gnorm / 2.0) + abs(lam1) + 1.0
    while phi(b) > 0.0:
        b *= 2.0
    lam = optimize.brentq(phi, a, b, xtol=1e-300, rtol=4.0 * np.finfo(float).eps, maxiter=500)
    near = lam_all + lam <= 1e-8 * scale
    if np.any(near):
        # near the hard case the leftmost components are too sensitive to
        # rounding in lam; recover them from ||s|| = 2 lam / sigma instead
        return Q @ _complete_norm(gh, lam_all, lam, near, sigma)
    return -(Q @ (gh / (lam_all + lam)))


def _complete_norm(gh, lam_all, lam, left, sigma):
    """Eigen-coordinates of the step: solved off ``left``, sized on ``left`` so that ``||s|| = 2 lam / sigma``."""
    coef = np.zeros_like(gh)
    coef[~left] = -gh[~left] / (lam_all[~left] + lam)
    spare = math.sqrt(max((2.0 * lam / sigma) ** 2 - float(coef @ coef), 0.0))
    direction = -gh[left]
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        direction = np.zeros_like(direction)
        direction[0] = 1.0
    else:
        direction = direction / norm
    coef[left] = spare * direction
    return coef


def _line_coefficients(state: ModelState, s: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Polynomial coefficients (ascending in t) of ``Tbar(s + t d) - Tbar(0)``."""
    p = state.p
    coef = np.zeros(p + 1)
    for i, D in enumerate(state.tensors(), start=1):
        # D[s + t d]^i = sum_j C(i, j) D[s]^(i-j) [d]^j t^j
        inner = D
        partial = [None] * (i + 1)
        # partial[j] = D[d]^j as a tensor of order i - j
        partial[0] = inner
        for j in range(1, i + 1):
            partial[j] = contract(partial[j - 1], d, 1)
        for j in range(i + 1):
            val = contract(partial[j], s, i - j) if i - j > 0 else partial[j]
            coef[j] += math.comb(i, j) * float(val) / math.factorial(i)
    return coef


def _line_minimize(state: ModelState, s: np.ndarray, d: np.ndarray) -> Tuple[float, float]:
    """Global minimizer over ``t`` of ``m(s + t d)``; returns ``(t, m(s + t d) - m(0))``."""
    p = state.p
    c = _line_coefficients(state, s, d)
    a2, a1, a0 = float(d @ d), 2.0 * float(s @ d), float(s @ s)
    rho = state.sigma / math.factorial(p + 1)
    if a2 == 0.0:
        return 0.0, model_decrease(state, s)
    if (p + 1) % 2 == 0:
        quad = np.array([a0, a1, a2])
        reg = np.array([1.0])
        for _ in range((p + 1) // 2):
            reg = np.convolve(reg, quad)
        poly = np.zeros(max(len(c), len(reg)))
        poly[: len(c)] += c
        poly[: len(reg)] += rho * reg
        roots = np.roots(np.polynomial.polynomial.polyder(poly)[::-1])
        cands = [0.0] + [float(r.real) for r in roots if abs(r.imag) <= 1e-8 * (1.0 + abs(r))]
        best = min(cands, key=lambda t: model_decrease(state, s + t * d))
        return best, model_decrease(state, s + best * d)

    def phi(t):
        return float(np.polynomial.polynomial.polyval(t, c)) + rho * (a0 + a1 * t + a2 * t * t) ** ((p + 1) / 2.0)

    # coercive in t: beyond this radius the regularizer dominates the Taylor part
    radius = 1.0 + (np.sum(np.abs(c[1:])) / (rho * a2 ** ((p + 1) / 2.0))) + math.sqrt(a0 / a2)
    grid = np.linspace(-radius, radius, 401)
    vals = np.array([phi(t) for t in grid])
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(phi, bounds=(lo, hi), method="bounded", options={"xatol": 1e-14 * radius})
    best = min([0.0, float(res.x), float(grid[j])], key=lambda t: model_decrease(state, s + t * d))
    return best, model_decrease(state, s + best * d)


def inner_descent(
    state: ModelState,
    theta1: float,
    theta2: float,
    cfg: SubsolverConfig = SubsolverConfig(),
    s0: Optional[np.ndarray] = None,
    gtol: Optional[float] = None,
) -> Tuple[np.ndarray, StepCertificate]:
    """Monotone descent on the model, stopping the first time the certificate holds.

    Each iteration compares a (shifted) Newton step with backtracking against an
    exact line minimization along the leftmost eigenvector of the model Hessian
    when it is indefinite, and keeps whichever lowers the model more.

    With ``gtol`` set, descent continues past the first certificate until the
    model gradient norm is at most ``gtol`` as well.
    """
    t1, t2 = cfg.target(theta1), cfg.target(theta2)
    s = np.zeros(state.dim) if s0 is None else np.array(s0, dtype=float)
    if model_decrease(state, s) > 0.0:
        s = np.zeros(state.dim)
    val = model_decrease(state, s)
    cert = check_step(state, s, t1, t2)

    def done(s, cert):
        return cert.ok and (gtol is None or float(np.linalg.norm(model_grad(state, s))) <= gtol)

    for _ in range(cfg.inner_budget):
        if done(s, cert):
            return s, check_step(state, s, theta1, theta2)
        G = model_grad(state, s)
        H = model_hess(state, s)
        lam, V = np.linalg.eigh(H)
        hscale = max(1.0, float(np.max(np.abs(lam))))
        gn = float(np.linalg.norm(G))
        candidates = []

        # Newton, shifted to positive definiteness when needed
        shift = 0.0
        if lam[0] <= 1e-12 * hscale:
            shift = -lam[0] + max(1e-10 * hscale, math.sqrt(gn))
        d = -(V @ ((V.T @ G) / (lam + shift)))
        slope = float(G @ d)
        if slope < 0.0:
            t = 1.0
            for _ in range(60):
                trial = model_decrease(state, s + t * d)
                if trial <= val + 1e-4 * t * slope:
                    candidates.append((trial, s + t * d))
                    break
                t *= 0.5

        if lam[0] < 0.0:
            v = V[:, 0]
            if G @ v > 0.0:
                v = -v
            t, trial = _line_minimize(state, s, v)
            candidates.append((trial, s + t * v))

        if not candidates and gn > 0.0:
            t, trial = _line_minimize(state, s, -G / gn)
            candidates.append((trial, s - t * G / gn))

        if not candidates:
            break
        trial, s_new = min(candidates, key=lambda c: c[0])
        if trial > val:
            break
        stalled = trial == val and np.array_equal(s_new, s)
        s, val = s_new, trial
        cert = check_step(state, s, t1, t2)
        if stalled and not done(s, cert):
            break
    final = check_step(state, s, theta1, theta2)
    if final.ok:
        return s, final
    raise BudgetExhausted(
        f"inner descent stopped after {cfg.inner_budget} iterations without a certificate "
        f"(|grad Tbar|={final.grad_norm:.3e} vs {final.theta1_rhs:.3e}, "
        f"lam_min={final.lam_min_model:.3e} vs -{final.theta2_rhs:.3e})",
        s,
        final,
        cfg.inner_budget,
    )


def minimize_model(
    state: ModelState,
    theta1: float,
    theta2: float,
    cfg: SubsolverConfig = SubsolverConfig(),
) -> Tuple[np.ndarray, StepCertificate]:
    """Return a step whose certificate (decrease, theta1, theta2) holds for ``state``."""
    if theta1 <= 1.0 or theta2 <= 1.0:
        raise ValueError("theta1 and theta2 must exceed 1")
    method = cfg.method
    if method == "auto":
        method = "exact-secular" if state.p == 2 else "inner-descent"
    if method == "exact-secular":
        if state.p != 2:
            raise ValueError("the exact secular solver handles p = 2 only")
        s = exact_cubic_step(state.g, state.T, state.sigma)
        cert = check_step(state, s, theta1, theta2)
        if cert.ok:
            return s, cert
        # rounding left the closed-form point just outside; polish it
        return inner_descent(state, theta1, theta2, cfg, s0=s)
    return inner_descent(state, theta1, theta2, cfg)
