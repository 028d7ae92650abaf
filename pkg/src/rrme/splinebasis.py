"""Orthonormal cubic B-spline bases with roughness penalties.

Raw B-splines on a clamped knot vector are orthonormalized with the Cholesky
factor of their Gram matrix, ``b(t) = L^{-1} B(t)`` where ``G = L L^T``.
All integrals are evaluated with per-interval Gauss-Legendre rules that are
exact for the piecewise-polynomial integrands involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cholesky, solve_triangular

from .errors import DegenerateBasisError, InvalidArgumentError, InvalidKnotsError, OutOfDomainError

__all__ = [
    "KnotVector",
    "OrthonormalBasis",
    "make_basis",
    "equispaced_knots",
    "eval_basis",
    "design_matrix",
    "penalty_matrix",
    "project_function",
]


@dataclass(frozen=True)
class KnotVector:
    domain: tuple[float, float]
    interior_knots: tuple[float, ...]
    degree: int = 3

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise InvalidKnotsError(f"invalid domain {self.domain!r}")
        knots = tuple(float(k) for k in self.interior_knots)
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidKnotsError(f"degree must be a non-negative integer, got {self.degree!r}")
        if any(not (lo < k < hi) for k in knots):
            raise InvalidKnotsError("interior knots must lie strictly inside the domain")
        if any(b < a for a, b in zip(knots, knots[1:])):
            raise InvalidKnotsError("interior knots must be non-decreasing")
        object.__setattr__(self, "domain", (lo, hi))
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "degree", int(self.degree))

    @property
    def dim(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def full(self) -> np.ndarray:
        lo, hi = self.domain
        p = self.degree + 1
        return np.concatenate([np.full(p, lo), self.interior_knots, np.full(p, hi)])

    def breakpoints(self) -> np.ndarray:
        return np.unique(np.concatenate([[self.domain[0]], self.interior_knots, [self.domain[1]]]))


def equispaced_knots(domain: Sequence[float], n_interior: int) -> tuple[float, ...]:
    lo, hi = domain
    return tuple(np.linspace(lo, hi, n_interior + 2)[1:-1])


def _raw_values(knots: KnotVector, t: np.ndarray, deriv: int = 0) -> np.ndarray:
    q = knots.dim
    spl = BSpline(knots.full, np.eye(q), knots.degree, extrapolate=False)
    if deriv:
        spl = spl.derivative(deriv)
    out = spl(t)
    # the right endpoint is evaluated as a left limit
    bad = ~np.isfinite(out)
    if bad.any():
        out[bad] = 0.0
    return out


def _gauss_legendre_integral(knots: KnotVector, deriv: int) -> np.ndarray:
    """Integral of B^(deriv) B^(deriv)^T over the domain, exact for splines."""
    nodes, weights = np.polynomial.legendre.leggauss(knots.degree + 1)
    brk = knots.breakpoints()
    a, b = brk[:-1], brk[1:]
    half = 0.5 * (b - a)
    ts = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    ws = half[:, None] * weights[None, :]
    vals = _raw_values(knots, ts.ravel(), deriv)
    return vals.T @ (ws.ravel()[:, None] * vals)


@dataclass(frozen=True, eq=False)
class OrthonormalBasis:
    """Orthonormal spline basis on ``knots.domain``.

    ``transform`` maps raw B-spline values to orthonormal values,
    ``b(t) = transform @ B(t)``; ``gram`` holds raw-basis inner products and
    ``omega`` the second-derivative penalty in orthonormal coordinates.
    """

    knots: KnotVector
    transform: np.ndarray
    gram: np.ndarray
    omega: np.ndarray | None = field(default=None)

    @property
    def dim(self) -> int:
        return self.knots.dim

    @property
    def domain(self) -> tuple[float, float]:
        return self.knots.domain

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky(self.gram, lower=True)

    def from_raw(self, raw_coefs: np.ndarray) -> np.ndarray:
        """Orthonormal coordinates of a function given its raw B-spline coefficients."""
        return self.chol.T @ np.asarray(raw_coefs, dtype=float)

    def to_raw(self, coefs: np.ndarray) -> np.ndarray:
        return solve_triangular(self.chol.T, np.asarray(coefs, dtype=float), lower=False)

    def spec(self) -> dict:
        return {
            "domain": list(self.knots.domain),
            "knots": list(self.knots.interior_knots),
            "degree": self.knots.degree,
        }


def make_basis(domain: Sequence[float], interior_knots: Sequence[float], degree: int = 3) -> OrthonormalBasis:
    if len(interior_knots) < 1:
        raise InvalidKnotsError("at least one interior knot is required")
    if degree < 1:
        raise InvalidKnotsError("degree must be at least 1")
    knots = KnotVector(tuple(domain), tuple(interior_knots), degree)
    gram = _gauss_legendre_integral(knots, 0)
    gram = 0.5 * (gram + gram.T)
    try:
        L = cholesky(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasisError("raw Gram matrix is not positive definite") from exc
    if np.min(np.diag(L)) ** 2 < 1e-13 * np.max(np.diag(gram)):
        raise DegenerateBasisError("raw Gram matrix is numerically singular")
    transform = solve_triangular(L, np.eye(knots.dim), lower=True)
    basis = OrthonormalBasis(knots, transform, gram)
    omega = penalty_matrix(basis) if degree >= 2 else None
    object.__setattr__(basis, "omega", omega)
    return basis


def _check_domain(basis: OrthonormalBasis, t: np.ndarray) -> None:
    lo, hi = basis.domain
    span = hi - lo
    bad = np.flatnonzero((t < lo - 1e-12 * span) | (t > hi + 1e-12 * span) | ~np.isfinite(t))
    if bad.size:
        i = int(bad[0])
        raise OutOfDomainError(f"time {float(t.flat[i])!r} at index {i} is outside [{lo}, {hi}]")


def eval_basis(basis: OrthonormalBasis, t: float, deriv: int = 0) -> np.ndarray:
    """Orthonormal basis vector ``b(t)`` (or its ``deriv``-th derivative)."""
    return design_matrix(basis, np.array([t], dtype=float), deriv)[0]


def design_matrix(basis: OrthonormalBasis, times, deriv: int = 0) -> np.ndarray:
    if deriv not in (0, 1, 2):
        raise InvalidArgumentError("derivative order must be 0, 1 or 2")
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        return np.zeros((0, basis.dim))
    _check_domain(basis, t)
    lo, hi = basis.domain
    t = np.clip(t, lo, hi)
    raw = _raw_values(basis.knots, t, deriv)
    return raw @ basis.transform.T


def penalty_matrix(basis: OrthonormalBasis) -> np.ndarray:
    if basis.knots.degree < 2:
        raise InvalidArgumentError("roughness penalty needs degree >= 2")
    raw = _gauss_legendre_integral(basis.knots, 2)
    omega = basis.transform @ raw @ basis.transform.T
    return 0.5 * (omega + omega.T)


def project_function(basis: OrthonormalBasis, fn: Callable[[np.ndarray], np.ndarray], n_nodes: int = 12) -> np.ndarray:
    """L2 projection coefficients ``int b(t) f(t) dt`` by per-interval Gauss-Legendre."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    brk = basis.knots.breakpoints()
    a, b = brk[:-1], brk[1:]
    half = 0.5 * (b - a)
    ts = ((0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]).ravel()
    ws = (half[:, None] * weights[None, :]).ravel()
    return design_matrix(basis, ts).T @ (ws * np.asarray(fn(ts), dtype=float))
