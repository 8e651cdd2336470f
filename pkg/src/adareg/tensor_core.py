"""Dense symmetric tensor algebra.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n,) * q``.  An order-q
tensor ``T`` acts as a multilinear form, ``T[s1, ..., sq] = sum T_i s1_i1 ... sq_iq``.
Contractions always consume the trailing axes, which is immaterial for
symmetric tensors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize

SYM_RTOL = 1e-12


class DimensionError(ValueError):
    pass


class GridGuardError(ValueError):
    """Raised when the exhaustive grid norm is requested beyond n <= 3, order <= 3."""


def _check_square(T: np.ndarray) -> int:
    if T.ndim == 0:
        raise DimensionError("expected a tensor of order >= 1")
    n = T.shape[0]
    if any(d != n for d in T.shape):
        raise DimensionError(f"tensor shape {T.shape} is not cubical")
    return n


def is_symmetric(T: np.ndarray, rtol: float = SYM_RTOL) -> bool:
    T = np.asarray(T, dtype=float)
    _check_square(T)
    scale = max(1.0, float(np.max(np.abs(T)))) if T.size else 1.0
    for perm in itertools.permutations(range(T.ndim)):
        if np.max(np.abs(T - np.transpose(T, perm)), initial=0.0) > rtol * scale:
            return False
    return True


def sym_project(T: np.ndarray) -> np.ndarray:
    """Average of ``T`` over all permutations of its indices."""
    T = np.asarray(T, dtype=float)
    _check_square(T)
    q = T.ndim
    if q == 1:
        return T.copy()
    acc = np.zeros_like(T)
    for perm in itertools.permutations(range(q)):
        acc += np.transpose(T, perm)
    return acc / math.factorial(q)


def contract(T: np.ndarray, s: np.ndarray, times: int = 1):
    """Contract ``T`` with the vector ``s`` in ``times`` slots.

    Returns an ndarray of order ``q - times``; a Python float when ``times == q``.
    """
    T = np.asarray(T, dtype=float)
    n = _check_square(T)
    s = np.asarray(s, dtype=float)
    if s.shape != (n,):
        raise DimensionError(f"vector of shape {s.shape} does not match dim {n}")
    if times < 0 or times > T.ndim:
        raise DimensionError(f"cannot contract an order-{T.ndim} tensor {times} times")
    out = T
    for _ in range(times):
        out = out @ s
    if out.ndim == 0:
        return float(out)
    return out


def apply_matrix(T: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Return ``T[W]^q``, i.e. the tensor with ``(T[W]^q)[s1..sq] = T[W s1, ..., W sq]``."""
    T = np.asarray(T, dtype=float)
    n = _check_square(T)
    W = np.asarray(W, dtype=float)
    if W.shape != (n, n):
        raise DimensionError(f"matrix of shape {W.shape} does not match dim {n}")
    out = T
    # each pass contracts axis 0 with W's row index and appends the new axis last
    for _ in range(T.ndim):
        out = np.tensordot(out, W, axes=([0], [0]))
    return out


def frob_inner(T1: np.ndarray, T2: np.ndarray) -> float:
    T1 = np.asarray(T1, dtype=float)
    T2 = np.asarray(T2, dtype=float)
    if T1.shape != T2.shape:
        raise DimensionError(f"shape mismatch {T1.shape} vs {T2.shape}")
    return float(np.dot(T1.ravel(), T2.ravel()))


def frob_norm(T: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(T, dtype=float).ravel()))


def outer(*vectors: np.ndarray) -> np.ndarray:
    """``v1 ⊗ v2 ⊗ ... ⊗ vq`` as a dense array."""
    out = np.asarray(vectors[0], dtype=float)
    for v in vectors[1:]:
        out = np.multiply.outer(out, np.asarray(v, dtype=float))
    return out


def diag_tensor(values: np.ndarray, order: int) -> np.ndarray:
    """Order-``order`` tensor with ``values`` on the superdiagonal, zero elsewhere."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    T = np.zeros((n,) * order)
    idx = np.arange(n)
    T[(idx,) * order] = values
    return T


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric positive definite weight with cached spectral data."""

    matrix: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_matrix(cls, M: np.ndarray, rtol: float = SYM_RTOL) -> "WeightMatrix":
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError("weight must be a square matrix")
        scale = max(1.0, float(np.max(np.abs(M))))
        if np.max(np.abs(M - M.T)) > rtol * scale:
            raise ValueError("weight matrix is not symmetric")
        M = 0.5 * (M + M.T)
        w, V = np.linalg.eigh(M)
        if w[0] <= 0.0:
            raise ValueError(f"weight matrix is not positive definite (lambda_min={w[0]:.3e})")
        return cls(M, w, V)

    @classmethod
    def identity(cls, n: int) -> "WeightMatrix":
        return cls(np.eye(n), np.ones(n), np.eye(n))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def lam_min(self) -> float:
        return float(self.eigvals[0])

    @property
    def lam_max(self) -> float:
        return float(self.eigvals[-1])

    @property
    def cond(self) -> float:
        return self.lam_max / self.lam_min

    def inverse(self) -> np.ndarray:
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T


class NormEstimate(NamedTuple):
    """A lower-bound estimate of a tensor 2-norm.

    ``slack`` bounds how far below the true norm a grid estimate can fall;
    it is ``None`` for the power method, whose value is only certified as a
    lower bound.
    """

    value: float
    method: str
    mesh: Optional[float] = None
    slack: Optional[float] = None


def _sphere_grid(n: int, mesh: float) -> tuple[np.ndarray, float]:
    """Unit vectors covering the sphere (up to sign) and the geodesic covering radius."""
    if n == 1:
        return np.ones((1, 1)), 0.0
    if n == 2:
        k = int(math.ceil(math.pi / mesh))
        theta = np.arange(k) * (math.pi / k)
        return np.column_stack([np.cos(theta), np.sin(theta)]), 0.5 * math.pi / k
    kt = int(math.ceil(math.pi / mesh))
    kp = int(math.ceil(2.0 * math.pi / mesh))
    theta = np.arange(kt + 1) * (math.pi / kt)
    phi = np.arange(kp) * (2.0 * math.pi / kp)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    pts = np.column_stack(
        [(np.sin(th) * np.cos(ph)).ravel(), (np.sin(th) * np.sin(ph)).ravel(), np.cos(th).ravel()]
    )
    dt, dp = math.pi / kt, 2.0 * math.pi / kp
    return pts, math.hypot(0.5 * dt, 0.5 * dp)


def _form_values(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    vals = T
    # contract the trailing axis with every point at once
    vals = np.einsum("...i,ki->k...", vals, pts)
    for _ in range(T.ndim - 1):
        vals = np.einsum("k...i,ki->k...", vals, pts)
    return vals


def _grid_norm(T: np.ndarray, mesh: float) -> NormEstimate:
    n, p = T.shape[0], T.ndim
    if n > 3 or p > 3:
        raise GridGuardError(f"grid norm restricted to n <= 3 and order <= 3 (got n={n}, order={p})")
    pts, radius = _sphere_grid(n, mesh)
    value = float(np.max(np.abs(_form_values(T, pts))))
    slack = p * p * frob_norm(T) * radius**2 / 2.0
    return NormEstimate(value, "grid", mesh, slack)


def _power_norm(T: np.ndarray, restarts: int, seed: int, iters: int) -> NormEstimate:
    p = T.ndim
    n = T.shape[0]
    scale = frob_norm(T)
    if scale == 0.0:
        return NormEstimate(0.0, "power")
    rng = np.random.default_rng(seed)
    Tn = T / scale
    shift = float(p - 1)  # >= (p-1) * ||Tn||_F keeps the shifted iteration monotone
    best = 0.0
    for sign in (1.0, -1.0):
        for _ in range(restarts):
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            for _ in range(iters):
                y = sign * contract(Tn, x, p - 1) + shift * x
                y /= np.linalg.norm(y)
                done = np.linalg.norm(y - x) < 1e-10
                x = y
                if done:
                    break

            def neg(u, sign=sign):
                nu = np.linalg.norm(u)
                return -sign * contract(Tn, u / nu, p)

            res = optimize.minimize(neg, x, method="BFGS", options={"gtol": 1e-12})
            for cand in (x, res.x):
                u = cand / np.linalg.norm(cand)
                best = max(best, abs(contract(Tn, u, p)))
    return NormEstimate(best * scale, "power")


def op_norm(
    T: np.ndarray,
    W: Optional[WeightMatrix] = None,
    method: str = "power",
    *,
    mesh: Optional[float] = None,
    restarts: int = 8,
    seed: int = 0,
    iters: int = 200,
) -> NormEstimate:
    """Lower-bound estimate of ``||T||_W = max |T[W s1, ..., W sq]|`` over unit ``s_i``.

    ``method="power"`` runs a shifted symmetric higher-order power iteration from
    ``restarts`` seeded random starts (per sign), polished by BFGS on the sphere.
    Order-2 tensors use a dense eigensolver.  ``method="grid"`` maximises over a
    deterministic sphere mesh (n <= 3, order <= 3) and reports the slack
    ``p^2 ||T||_F r^2 / 2`` with r the geodesic covering radius.
    """
    T = np.asarray(T, dtype=float)
    _check_square(T)
    if W is not None:
        T = apply_matrix(T, W.matrix)
    if method == "grid":
        if mesh is None:
            mesh = 1e-3 if T.shape[0] <= 2 else 1e-2
        return _grid_norm(T, mesh)
    if method != "power":
        raise ValueError(f"unknown norm method {method!r}")
    if T.ndim == 1:
        return NormEstimate(float(np.linalg.norm(T)), "power")
    if T.ndim == 2:
        return NormEstimate(float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (T + T.T))))), "power")
    return _power_norm(T, restarts, seed, iters)


@lru_cache(maxsize=64)
def sym_basis(n: int, q: int) -> np.ndarray:
    """Frobenius-orthonormal basis of symmetric order-q tensors, as columns of an (n^q, N) array.

    Column u is the normalised indicator of the permutation orbit of the
    sorted multi-index u.
    """
    combos = list(itertools.combinations_with_replacement(range(n), q))
    E = np.zeros((n**q, len(combos)))
    for col, combo in enumerate(combos):
        orbit = set(itertools.permutations(combo))
        w = 1.0 / math.sqrt(len(orbit))
        for idx in orbit:
            E[np.ravel_multi_index(idx, (n,) * q), col] = w
    E.setflags(write=False)
    return E
