"""Analytic test objectives with exact derivatives of every order the solver needs.

Each problem declares Lipschitz constants ``lipschitz[p]`` for its order-p
derivative in the tensor 2-norm, either globally or on the box
``[-box, box]^n`` (see ``lipschitz_scope``).  New objectives plug in through
:func:`register_problem`.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Dict, Optional

import numpy as np

from .tensor_core import contract, diag_tensor, frob_norm


class UnsupportedOrder(ValueError):
    pass


class Problem:
    """Base class; subclasses implement ``value`` and ``_derivative``."""

    name = "problem"
    max_order = 4
    bounded_below = True
    # "global" or "box": where the declared Lipschitz constants hold
    lipschitz_scope = "global"
    box: Optional[float] = None
    # initial regularization weight per model order used by corpus experiments,
    # sized so that the first steps stay inside the box; 1.0 when absent
    sigma0_by_order: Dict[int, float] = {}

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim
        self.lipschitz: Dict[int, float] = {}

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def _derivative(self, x: np.ndarray, order: int) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, x: np.ndarray, order: int) -> np.ndarray:
        if order < 1 or order > self.max_order:
            raise UnsupportedOrder(f"{self.name}: derivative order {order} not available")
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected x of shape ({self.dim},), got {x.shape}")
        return self._derivative(x, order)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.derivative(x, 1)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return self.derivative(x, 2)

    def lipschitz_constant(self, p: int) -> float:
        try:
            return self.lipschitz[p]
        except KeyError:
            raise UnsupportedOrder(f"{self.name}: no Lipschitz constant declared for order {p}") from None

    def suggested_sigma0(self, p: int) -> float:
        return self.sigma0_by_order.get(p, 1.0)

    def default_start(self, rng: np.random.Generator) -> np.ndarray:
        half = self.box if self.box is not None else 2.0
        return rng.uniform(-0.5 * half, 0.5 * half, size=self.dim)

    def sample_box(self) -> float:
        return self.box if self.box is not None else 3.0

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


class Quadratic(Problem):
    """Convex quadratic ``0.5 x'Ax - b'x`` with a seeded SPD ``A`` (spectrum in [1, 10])."""

    name = "quadratic"
    max_order = 8

    def __init__(self, dim: int, A: Optional[np.ndarray] = None, b: Optional[np.ndarray] = None, seed: int = 0):
        super().__init__(dim)
        rng = np.random.default_rng(seed)
        if A is None:
            Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            A = (Q * np.linspace(1.0, 10.0, dim)) @ Q.T
        if b is None:
            b = rng.standard_normal(dim)
        self.A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
        self.b = np.asarray(b, dtype=float)
        self.lipschitz = {p: 0.0 for p in range(2, self.max_order + 1)}

    def value(self, x):
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def _derivative(self, x, order):
        if order == 1:
            return self.A @ x - self.b
        if order == 2:
            return self.A.copy()
        return np.zeros((self.dim,) * order)

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)


class _Separable(Problem):
    """Sum of identical univariate terms plus a linear term; derivatives are diagonal."""

    linear = 0.0

    def _d(self, x: np.ndarray, order: int) -> np.ndarray:
        raise NotImplementedError

    def _derivative(self, x, order):
        d = self._d(x, order)
        if order == 1:
            return d + self.linear
        return diag_tensor(d, order)


class SeparableQuartic(_Separable):
    """``sum (x_j^2 - 1)^2 + 0.1 sum x_j``.

    Hessian Lipschitz constant ``24 * box`` on the box; third derivative
    Lipschitz constant 24 globally.
    """

    name = "quartic"
    box = 3.0
    lipschitz_scope = "box"
    linear = 0.1

    def __init__(self, dim: int):
        super().__init__(dim)
        self.lipschitz = {2: 24.0 * self.box, 3: 24.0, 4: 0.0}

    def value(self, x):
        return float(np.sum((x**2 - 1.0) ** 2) + self.linear * np.sum(x))

    def _d(self, x, order):
        if order == 1:
            return 4.0 * x**3 - 4.0 * x
        if order == 2:
            return 12.0 * x**2 - 4.0
        if order == 3:
            return 24.0 * x
        if order == 4:
            return np.full_like(x, 24.0)
        return np.zeros_like(x)


class Trigonometric(_Separable):
    """``sum cos(x_j) + 0.05 ||x||^2``; every derivative of order >= 2 is 1-Lipschitz."""

    name = "trig"
    max_order = 8

    def __init__(self, dim: int):
        super().__init__(dim)
        self.lipschitz = {p: 1.0 for p in range(2, self.max_order)}

    def value(self, x):
        return float(np.sum(np.cos(x)) + 0.05 * x @ x)

    def _d(self, x, order):
        d = np.cos(x + 0.5 * math.pi * order)
        if order == 1:
            return d + 0.1 * x
        if order == 2:
            return d + 0.1
        return d


class Rosenbrock(Problem):
    """Extended (chained) Rosenbrock ``sum 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2``.

    The Hessian is only locally Lipschitz: ``lipschitz[2]`` bounds the Frobenius
    norm of the third derivative on the box.  The third derivative is
    2400-Lipschitz globally.
    """

    name = "rosenbrock"
    box = 3.0
    lipschitz_scope = "box"
    sigma0_by_order = {2: 100.0, 3: 1000.0}

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("rosenbrock needs dim >= 2")
        super().__init__(dim)
        m = dim - 1
        self.lipschitz = {
            2: math.sqrt(m * (2400.0 * self.box) ** 2 + 3.0 * m * 400.0**2),
            3: 2400.0,
            4: 0.0,
        }

    def value(self, x):
        return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))

    def default_start(self, rng):
        x = np.ones(self.dim)
        x[0::2] = -1.2
        return x

    def _derivative(self, x, order):
        n = self.dim
        a, b = x[:-1], x[1:]
        i = np.arange(n - 1)
        if order == 1:
            g = np.zeros(n)
            g[:-1] += -400.0 * a * (b - a**2) - 2.0 * (1.0 - a)
            g[1:] += 200.0 * (b - a**2)
            return g
        if order == 2:
            H = np.zeros((n, n))
            H[i, i] += 1200.0 * a**2 - 400.0 * b + 2.0
            H[i + 1, i + 1] += 200.0
            H[i, i + 1] = H[i + 1, i] = -400.0 * a
            return H
        T = np.zeros((n,) * order)
        if order == 3:
            T[i, i, i] = 2400.0 * a
            for idx in ((i, i, i + 1), (i, i + 1, i), (i + 1, i, i)):
                T[idx] = -400.0
        elif order == 4:
            T[i, i, i, i] = 2400.0
        return T


_REGISTRY: Dict[str, Callable[..., Problem]] = {
    "quadratic": Quadratic,
    "quartic": SeparableQuartic,
    "rosenbrock": Rosenbrock,
    "trig": Trigonometric,
}


def register_problem(name: str, factory: Callable[..., Problem]) -> None:
    _REGISTRY[name] = factory


def available_problems() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(name: str, dim: int, **kwargs) -> Problem:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {available_problems()}") from None
    return factory(dim, **kwargs)


class CountingProblem(Problem):
    """Wraps a problem and tallies oracle calls per derivative order (0 = value)."""

    def __init__(self, base: Problem):
        self.base = base
        self.dim = base.dim
        self.name = base.name
        self.max_order = base.max_order
        self.lipschitz = base.lipschitz
        self.box = base.box
        self.lipschitz_scope = base.lipschitz_scope
        self.bounded_below = base.bounded_below
        self.sigma0_by_order = base.sigma0_by_order
        self.calls: Counter = Counter()

    def value(self, x):
        self.calls[0] += 1
        return self.base.value(x)

    def derivative(self, x, order):
        self.calls[order] += 1
        return self.base.derivative(x, order)

    def default_start(self, rng):
        return self.base.default_start(rng)

    def sample_box(self):
        return self.base.sample_box()


def unwrap(problem: Problem) -> Problem:
    """The underlying problem, bypassing any call counting (for diagnostics)."""
    while isinstance(problem, CountingProblem):
        problem = problem.base
    return problem


def fd_check(problem: Problem, x: np.ndarray, order: int, h: float) -> float:
    """Max over coordinate directions of the forward-difference error of ``derivative(., order)``."""
    if order < 2:
        raise ValueError("fd_check needs order >= 2")
    x = np.asarray(x, dtype=float)
    lower = problem.derivative(x, order - 1)
    D = problem.derivative(x, order)
    worst = 0.0
    for j in range(problem.dim):
        e = np.zeros(problem.dim)
        e[j] = 1.0
        fd = (problem.derivative(x + h * e, order - 1) - lower) / h
        worst = max(worst, frob_norm(fd - contract(D, e)))
    return worst


def lipschitz_audit(problem: Problem, p: int, pairs: int = 1000, seed: int = 0) -> float:
    """Largest sampled ratio ``||D^p f(x) - D^p f(y)||_F / (||x - y|| * sqrt(n^p))`` on the test box.

    A declared constant passes the audit when this ratio does not exceed it.
    """
    rng = np.random.default_rng(seed)
    R = problem.sample_box()
    n = problem.dim
    worst = 0.0
    for _ in range(pairs):
        x = rng.uniform(-R, R, n)
        y = rng.uniform(-R, R, n)
        diff = frob_norm(problem.derivative(x, p) - problem.derivative(y, p))
        worst = max(worst, diff / (np.linalg.norm(x - y) * math.sqrt(n**p)))
    return worst
