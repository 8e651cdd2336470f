"""Inexact Taylor expansion, the regularized model and the step certificate.

For a state at ``x`` with exact derivatives ``D_1 .. D_{p-1}`` and an
approximate p-th tensor ``T``::

    Tbar(s) = f + sum_{i<p} D_i[s]^i / i! + T[s]^p / p!
    m(s)    = Tbar(s) + sigma / (p+1)! * ||s||^(p+1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .tensor_core import contract


@dataclass(frozen=True)
class ModelState:
    """Frozen per-iteration data defining the model.

    ``f_x`` is carried for display only; nothing in the solver reads it.
    """

    x: np.ndarray
    derivs: List[np.ndarray]  # orders 1 .. p-1, exact
    T: np.ndarray  # order p, approximate
    sigma: float
    f_x: float = 0.0
    p: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "p", len(self.derivs) + 1)
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.T.ndim != self.p:
            raise ValueError(f"approximate tensor has order {self.T.ndim}, expected {self.p}")

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def g(self) -> np.ndarray:
        return self.derivs[0]

    def tensors(self) -> List[np.ndarray]:
        """Orders 1..p with the approximate tensor last."""
        return list(self.derivs) + [self.T]


@dataclass(frozen=True)
class StepCertificate:
    s: np.ndarray
    model_decrease: float
    grad_norm: float
    lam_min_model: float
    step_norm: float
    theta1_rhs: float
    theta2_rhs: float
    decrease_ok: bool
    theta1_ok: bool
    theta2_ok: bool

    @property
    def ok(self) -> bool:
        return self.decrease_ok and self.theta1_ok and self.theta2_ok


def taylor_decrease(state: ModelState, s: np.ndarray) -> float:
    """``Tbar(s) - Tbar(0)``."""
    total = 0.0
    for i, D in enumerate(state.tensors(), start=1):
        total += contract(D, s, i) / math.factorial(i)
    return total


def regularizer(state: ModelState, s: np.ndarray) -> float:
    p = state.p
    return state.sigma / math.factorial(p + 1) * float(np.linalg.norm(s)) ** (p + 1)


def model_decrease(state: ModelState, s: np.ndarray) -> float:
    """``m(s) - m(0)``, computed without the constant term."""
    return taylor_decrease(state, s) + regularizer(state, s)


def model_value(state: ModelState, s: np.ndarray) -> float:
    return state.f_x + model_decrease(state, s)


def taylor_grad(state: ModelState, s: np.ndarray) -> np.ndarray:
    out = np.zeros(state.dim)
    for i, D in enumerate(state.tensors(), start=1):
        term = contract(D, s, i - 1)
        out = out + np.asarray(term) / math.factorial(i - 1)
    return out


def taylor_hess(state: ModelState, s: np.ndarray) -> np.ndarray:
    H = np.zeros((state.dim, state.dim))
    for i, D in enumerate(state.tensors(), start=1):
        if i < 2:
            continue
        H = H + contract(D, s, i - 2) / math.factorial(i - 2)
    return 0.5 * (H + H.T)


def model_grad(state: ModelState, s: np.ndarray) -> np.ndarray:
    p = state.p
    ns = float(np.linalg.norm(s))
    return taylor_grad(state, s) + state.sigma / math.factorial(p) * ns ** (p - 1) * s


def model_hess(state: ModelState, s: np.ndarray) -> np.ndarray:
    p = state.p
    ns = float(np.linalg.norm(s))
    H = taylor_hess(state, s)
    if ns == 0.0:
        return H
    c = state.sigma / math.factorial(p)
    reg = c * (ns ** (p - 1) * np.eye(state.dim) + (p - 1) * ns ** (p - 3) * np.outer(s, s))
    return H + reg


def check_step(state: ModelState, s: np.ndarray, theta1: float, theta2: float) -> StepCertificate:
    """Evaluate the three acceptance conditions on a trial step (pure predicate)."""
    s = np.asarray(s, dtype=float)
    p = state.p
    ns = float(np.linalg.norm(s))
    dec = model_decrease(state, s)
    gnorm = float(np.linalg.norm(taylor_grad(state, s)))
    lam = float(np.linalg.eigvalsh(taylor_hess(state, s))[0])
    rhs1 = theta1 * state.sigma * ns**p / math.factorial(p)
    rhs2 = theta2 * state.sigma * ns ** (p - 1) / math.factorial(p - 1)
    return StepCertificate(
        s=s,
        model_decrease=dec,
        grad_norm=gnorm,
        lam_min_model=lam,
        step_norm=ns,
        theta1_rhs=rhs1,
        theta2_rhs=rhs2,
        decrease_ok=dec <= 0.0,
        theta1_ok=gnorm <= rhs1,
        theta2_ok=max(0.0, -lam) <= rhs2,
    )
