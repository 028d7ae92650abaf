"""Scale-mixture-of-normals mixing families.

A subject's observations given the latent scale ``u`` are Gaussian with
covariance ``Sigma / u``. Three mixing laws for ``u`` are supported:

* ``normal``     point mass at 1
* ``student_t``  Gamma(gamma/2, rate gamma/2)
* ``slash``      Beta(gamma, 1), density ``gamma u^(gamma-1)`` on (0, 1)

Given a Mahalanobis distance ``delta`` and observation count ``d`` the
posterior of ``u`` is proportional to ``p(u) u^(d/2) exp(-u delta / 2)``.
For the t family this is Gamma((gamma+d)/2, (gamma+delta)/2). For the slash
family it is a Gamma(a, delta/2) kernel truncated to (0, 1) with
``a = gamma + d/2``; its moments are evaluated from the positive series

    int_0^1 u^(a-1) e^(-b u) du = e^(-b) sum_k b^k / (a (a+1) ... (a+k)),

whose derivative in ``a`` gives ``E[log U]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import special

from .errors import DegenerateUpdateError, InvalidArgumentError, NotApplicableError

Kind = Literal["normal", "student_t", "slash"]
KINDS: tuple[str, ...] = ("normal", "student_t", "slash")
_ALIASES = {"t": "student_t", "student-t": "student_t", "gaussian": "normal"}

DEFAULT_GAMMA_BOUNDS = (0.1, 1000.0)
INITIAL_GAMMA = {"student_t": 10.0, "slash": 2.0}

__all__ = [
    "MixingFamily",
    "UPosteriorMoments",
    "canonical_kind",
    "mixing_log_density",
    "conditional_u_moments",
    "u_moments",
    "gamma_update",
    "gamma_objective",
    "log_marginal_kernel",
    "log_gamma",
    "digamma",
    "lower_incomplete_gamma_regularized",
]


def canonical_kind(kind: str) -> str:
    k = _ALIASES.get(str(kind).lower(), str(kind).lower())
    if k not in KINDS:
        raise InvalidArgumentError(f"unknown mixing family {kind!r}")
    return k


@dataclass(frozen=True)
class MixingFamily:
    kind: str
    gamma: float | None = None

    def __post_init__(self):
        kind = canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == "normal":
            object.__setattr__(self, "gamma", None)
        else:
            g = INITIAL_GAMMA[kind] if self.gamma is None else float(self.gamma)
            if not (g > 0 and np.isfinite(g)):
                raise InvalidArgumentError(f"degrees of freedom must be positive, got {self.gamma!r}")
            object.__setattr__(self, "gamma", g)

    def with_gamma(self, gamma: float) -> "MixingFamily":
        return MixingFamily(self.kind, gamma)


@dataclass(frozen=True)
class UPosteriorMoments:
    u_hat: float
    log_u_hat: float


# --- special functions --------------------------------------------------------


def log_gamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InvalidArgumentError("log_gamma requires x > 0")
    return special.gammaln(x)


def digamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InvalidArgumentError("digamma requires x > 0")
    return special.digamma(x)


def lower_incomplete_gamma_regularized(a, x):
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(a <= 0) or np.any(x < 0):
        raise InvalidArgumentError("incomplete gamma requires a > 0 and x >= 0")
    return special.gammainc(a, x)


# --- truncated gamma kernel on (0, 1) ----------------------------------------

_TAIL_EPS = 1e-17


def _slash_series(a: np.ndarray, b: np.ndarray, with_log_moment: bool):
    """log of int_0^1 u^(a-1) e^(-bu) du and, optionally, E[log U] under that kernel.

    Entries whose Gamma(a, b) upper tail beyond 1 is negligible use the
    untruncated gamma identities; the rest sum the positive series.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    log_int = np.empty(a.shape)
    log_mom = np.empty(a.shape)
    with np.errstate(divide="ignore"):
        tail = np.where(b > 0, special.gammaincc(a, np.where(b > 0, b, 1.0)), 1.0)
    far = (b > 0) & (tail < _TAIL_EPS)
    if far.any():
        af, bf = a[far], b[far]
        log_int[far] = special.gammaln(af) + np.log1p(-tail[far]) - af * np.log(bf)
        log_mom[far] = special.digamma(af) - np.log(bf)
    near = ~far
    if near.any():
        an, bn = a[near], b[near]
        n_terms = int(np.max(bn + 12.0 * np.sqrt(bn) + 60.0))
        k = np.arange(n_terms, dtype=float)[:, None]
        logb = np.where(bn > 0, np.log(np.where(bn > 0, bn, 1.0)), -np.inf)
        log_den = np.cumsum(np.log(an[None, :] + k), axis=0)
        with np.errstate(invalid="ignore"):
            log_terms = np.where(k == 0, 0.0, k * logb[None, :]) - log_den
        m = np.max(log_terms, axis=0)
        w = np.exp(log_terms - m[None, :])
        s = np.sum(w, axis=0)
        log_int[near] = -bn + m + np.log(s)
        if with_log_moment:
            harmonic = np.cumsum(1.0 / (an[None, :] + k), axis=0)
            log_mom[near] = -np.sum(w * harmonic, axis=0) / s
    return log_int, log_mom


def log_marginal_kernel(kind: str, gamma: float | None, delta, d):
    """log of int p(u) u^(d/2) exp(-u delta/2) du for each (delta, d).

    Adding ``-d/2 log(2 pi) - 1/2 log|Sigma|`` gives the marginal log density of
    a subject with Mahalanobis distance ``delta`` and ``d`` observations.
    """
    delta = np.asarray(delta, dtype=float)
    d = np.asarray(d, dtype=float)
    if kind == "normal":
        return -0.5 * delta
    if kind == "student_t":
        g = gamma
        return (
            special.gammaln(0.5 * (g + d))
            - special.gammaln(0.5 * g)
            + 0.5 * g * np.log(0.5 * g)
            - 0.5 * (g + d) * np.log(0.5 * (g + delta))
        )
    if kind == "slash":
        log_int, _ = _slash_series(gamma + 0.5 * d, 0.5 * delta, with_log_moment=False)
        return np.log(gamma) + log_int.reshape(np.broadcast(delta, d).shape)
    raise InvalidArgumentError(f"unknown mixing family {kind!r}")


# --- operations -----------------------------------------------------------------


def mixing_log_density(family: MixingFamily, u: float) -> float:
    """log p(u); returns -inf outside the support."""
    if family.kind == "normal":
        raise NotApplicableError("the normal family has a point-mass mixing law")
    u = float(u)
    g = family.gamma
    if family.kind == "student_t":
        if u <= 0:
            return -math.inf
        h = 0.5 * g
        return h * math.log(h) - math.lgamma(h) + (h - 1.0) * math.log(u) - h * u
    if not (0.0 < u < 1.0):
        return -math.inf
    return math.log(g) + (g - 1.0) * math.log(u)


def u_moments(kind: str, gamma: float | None, delta, d) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised E[U | data] and E[log U | data]."""
    delta = np.asarray(delta, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(delta < 0) or np.any(~np.isfinite(delta)):
        raise InvalidArgumentError("Mahalanobis distance must be finite and non-negative")
    shape = np.broadcast(delta, d).shape
    if kind == "normal":
        return np.ones(shape), np.zeros(shape)
    if kind == "student_t":
        shp = 0.5 * (gamma + d)
        rate = 0.5 * (gamma + delta)
        return shp / rate, special.digamma(shp) - np.log(rate)
    if kind == "slash":
        a = gamma + 0.5 * d
        b = 0.5 * delta
        log_i0, log_mom = _slash_series(a, b, with_log_moment=True)
        log_i1, _ = _slash_series(a + 1.0, b, with_log_moment=False)
        return np.exp(log_i1 - log_i0).reshape(shape), log_mom.reshape(shape)
    raise InvalidArgumentError(f"unknown mixing family {kind!r}")


def conditional_u_moments(family: MixingFamily, delta: float, d: int) -> UPosteriorMoments:
    if delta < 0:
        raise InvalidArgumentError("delta must be non-negative")
    if d < 1 or int(d) != d:
        raise InvalidArgumentError("d must be a positive integer")
    u, lu = u_moments(family.kind, family.gamma, delta, d)
    return UPosteriorMoments(float(u), float(lu))


def _gamma_objective_sums(kind: str, gamma: float, n: int, sum_u: float, sum_log_u: float) -> float:
    if kind == "student_t":
        return n * (-gamma * math.log(0.5 * gamma) + 2.0 * math.lgamma(0.5 * gamma)) - (gamma - 2.0) * sum_log_u + gamma * sum_u
    if kind == "slash":
        return -2.0 * n * math.log(gamma) - 2.0 * (gamma - 1.0) * sum_log_u
    raise NotApplicableError("no degrees of freedom for the normal family")


def gamma_objective(kind: str, gamma: float, u_hats, log_u_hats) -> float:
    """-2 sum_i E[log p_u(u_i; gamma)]; exact, including gamma-free terms."""
    u_hats = np.asarray(u_hats, dtype=float)
    log_u_hats = np.asarray(log_u_hats, dtype=float)
    return float(_gamma_objective_sums(kind, gamma, u_hats.size, float(np.sum(u_hats)), float(np.sum(log_u_hats))))


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the interval endpoints are candidates too: Q may be monotone on the box
    return min((lo, hi, x), key=f)


def gamma_update(kind: str, u_hats, log_u_hats, bounds=DEFAULT_GAMMA_BOUNDS, tol: float = 1e-6) -> float:
    kind = canonical_kind(kind)
    u_hats = np.asarray(u_hats, dtype=float)
    log_u_hats = np.asarray(log_u_hats, dtype=float)
    if u_hats.size == 0 or u_hats.shape != log_u_hats.shape:
        raise InvalidArgumentError("u_hats and log_u_hats must be equal-length and nonempty")
    lo, hi = (float(b) for b in bounds)
    if not (0 < lo < hi):
        raise InvalidArgumentError(f"invalid gamma bounds {bounds!r}")
    if kind == "normal":
        raise NotApplicableError("no degrees of freedom for the normal family")
    if kind == "slash":
        total = float(np.sum(log_u_hats))
        if total >= 0:
            raise DegenerateUpdateError("sum of E[log u] is non-negative; slash update undefined")
        return float(min(max(-u_hats.size / total, lo), hi))
    n, su, slu = u_hats.size, float(np.sum(u_hats)), float(np.sum(log_u_hats))
    return _golden_section(lambda g: _gamma_objective_sums(kind, g, n, su, slu), lo, hi, tol)
