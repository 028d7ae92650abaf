"""Reduced-rank mixed-effects model for paired sparse curves.

Model, for subject ``i`` with latent scale ``u_i``::

    Y_i = B_y (theta_mu + Theta_f alpha_i) + eps_i
    Z_i = B_z (theta_nu + Theta_g beta_i)  + xi_i
    (alpha_i, beta_i) | u_i ~ N(0, Sigma_ab / u_i)
    eps_i | u_i ~ N(0, s2_eps / u_i),  xi_i | u_i ~ N(0, s2_xi / u_i)

Subjects are processed in batches. With ``A_i = blockdiag(B_y Theta_f, B_z Theta_g)``,
``R_i`` the noise variances and ``S`` the symmetric square root of
``Sigma_ab``, the per-subject marginal covariance
``Sigma_i = A_i Sigma_ab A_i^T + R_i`` never has to be formed:

    M_i        = I + S A_i^T R_i^-1 A_i S
    Sigma_bar  = S M_i^-1 S
    score_mean = Sigma_bar A_i^T R_i^-1 r_i
    delta_i    = r_i^T R_i^-1 r_i - h_i^T Sigma_bar h_i,   h_i = A_i^T R_i^-1 r_i
    log|Sigma_i| = log|R_i| + log|M_i|

:func:`marginal_covariance` builds ``Sigma_i`` densely and is used as a
cross-check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import smnfamily
from .errors import DataError, InvalidArgumentError, NumericalError
from .smnfamily import DEFAULT_GAMMA_BOUNDS, INITIAL_GAMMA, MixingFamily
from .splinebasis import OrthonormalBasis, design_matrix

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
EIG_FLOOR = 0.0
LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "SubjectData",
    "PairedDataset",
    "ParameterSet",
    "Lambdas",
    "PosteriorSummary",
    "Posteriors",
    "FitOptions",
    "FitResult",
    "marginal_covariance",
    "e_step",
    "m_step_variances",
    "m_step_means",
    "m_step_pcs_and_cov",
    "identifiability_rotation",
    "q_function",
    "penalty",
    "penalized_objective",
    "fit",
    "predict_scores",
    "predict_curve",
    "initialize",
    "batched_posteriors",
]


# --- data ---------------------------------------------------------------------


@dataclass(eq=False)
class SubjectData:
    id: str
    times_y: np.ndarray
    values_y: np.ndarray
    times_z: np.ndarray
    values_z: np.ndarray

    def __post_init__(self):
        self.id = str(self.id)
        for name in ("times_y", "values_y", "times_z", "values_z"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.times_y.shape != self.values_y.shape or self.times_z.shape != self.values_z.shape:
            raise DataError(f"subject {self.id!r}: value and time lists differ in length")

    @property
    def n_y(self) -> int:
        return self.times_y.size

    @property
    def n_z(self) -> int:
        return self.times_z.size

    def subset(self, keep_y: np.ndarray, keep_z: np.ndarray) -> "SubjectData":
        return SubjectData(self.id, self.times_y[keep_y], self.values_y[keep_y], self.times_z[keep_z], self.values_z[keep_z])


@dataclass(eq=False)
class PairedDataset:
    subjects: list[SubjectData]
    domain: tuple[float, float]
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.subjects = list(self.subjects)
        lo, hi = (float(v) for v in self.domain)
        self.domain = (lo, hi)
        if not self.subjects:
            raise DataError("dataset has no subjects")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")
        for s in self.subjects:
            for t in (s.times_y, s.times_z):
                if t.size and (t.min() < lo or t.max() > hi):
                    raise DataError(f"subject {s.id!r} has observation times outside [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)


class _Design:
    """Padded per-subject design arrays for one (dataset, basis) pair."""

    def __init__(self, dataset: PairedDataset, basis: OrthonormalBasis):
        self.n = dataset.n
        self.q = basis.dim
        self.channels = []
        for tattr, vattr in (("times_y", "values_y"), ("times_z", "values_z")):
            counts = np.array([getattr(s, tattr).size for s in dataset.subjects], dtype=int)
            width = max(int(counts.max()), 1)
            times = np.concatenate([getattr(s, tattr) for s in dataset.subjects])
            vals = np.concatenate([getattr(s, vattr) for s in dataset.subjects])
            Bflat = design_matrix(basis, times)
            B = np.zeros((self.n, width, self.q))
            v = np.zeros((self.n, width))
            rows = np.repeat(np.arange(self.n), counts)
            cols = np.concatenate([np.arange(c) for c in counts]) if counts.sum() else np.zeros(0, int)
            B[rows, cols] = Bflat
            v[rows, cols] = vals
            BtB = np.swapaxes(B, 1, 2) @ B
            Btv = (np.swapaxes(B, 1, 2) @ v[..., None])[..., 0]
            self.channels.append(_Channel(B, v, counts, BtB, Btv, BtB.reshape(self.n, -1)))
        counts_total = self.channels[0].counts + self.channels[1].counts
        if np.any(counts_total == 0):
            i = int(np.flatnonzero(counts_total == 0)[0])
            raise DataError(f"subject {dataset.subjects[i].id!r} has no observations")
        self.d = counts_total


@dataclass
class _Channel:
    B: np.ndarray
    v: np.ndarray
    counts: np.ndarray
    BtB: np.ndarray
    Btv: np.ndarray
    BtB_flat: np.ndarray

    def weighted_gram(self, w: np.ndarray) -> np.ndarray:
        """sum_i w_i B_i^T B_i."""
        q = self.BtB.shape[1]
        return (w @ self.BtB_flat).reshape(q, q)


def _design(dataset: PairedDataset, basis: OrthonormalBasis) -> _Design:
    key = id(basis)
    hit = dataset._cache.get(key)
    if hit is None or hit[0] is not basis:
        hit = (basis, _Design(dataset, basis))
        dataset._cache[key] = hit
    return hit[1]


# --- parameters ---------------------------------------------------------------


@dataclass
class ParameterSet:
    """Full parameter collection. ``D_alpha`` and ``D_beta`` hold diagonal entries."""

    theta_mu: np.ndarray
    theta_nu: np.ndarray
    Theta_f: np.ndarray
    Theta_g: np.ndarray
    D_alpha: np.ndarray
    D_beta: np.ndarray
    C: np.ndarray
    sigma2_eps: float
    sigma2_xi: float
    family: MixingFamily

    def __post_init__(self):
        for name in ("theta_mu", "theta_nu", "D_alpha", "D_beta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        for name in ("Theta_f", "Theta_g", "C"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.sigma2_eps = float(self.sigma2_eps)
        self.sigma2_xi = float(self.sigma2_xi)
        if self.Theta_f.shape[1] != self.D_alpha.size or self.Theta_g.shape[1] != self.D_beta.size:
            raise InvalidArgumentError("PC matrix widths must match score-variance lengths")
        if self.C.shape != (self.k_alpha, self.k_beta):
            raise InvalidArgumentError("C must be k_alpha x k_beta")

    @property
    def k_alpha(self) -> int:
        return self.Theta_f.shape[1]

    @property
    def k_beta(self) -> int:
        return self.Theta_g.shape[1]

    @property
    def k(self) -> int:
        return self.k_alpha + self.k_beta

    def sigma_ab(self) -> np.ndarray:
        return np.block([[np.diag(self.D_alpha), self.C], [self.C.T, np.diag(self.D_beta)]])

    def copy(self, **changes) -> "ParameterSet":
        out = replace(self, **changes)
        for name in ("theta_mu", "theta_nu", "Theta_f", "Theta_g", "D_alpha", "D_beta", "C"):
            if name not in changes:
                setattr(out, name, getattr(self, name).copy())
        return out


@dataclass(frozen=True)
class Lambdas:
    mu: float = 0.0
    nu: float = 0.0
    f: float = 0.0
    g: float = 0.0

    def __post_init__(self):
        if any(not (v >= 0) for v in self.as_tuple()):
            raise InvalidArgumentError("penalty parameters must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mu, self.nu, self.f, self.g)

    @classmethod
    def coerce(cls, value) -> "Lambdas":
        if isinstance(value, Lambdas):
            return value
        if value is None:
            return cls()
        if isinstance(value, dict):
            return cls(**{k.replace("lambda_", ""): float(v) for k, v in value.items()})
        if np.isscalar(value):
            return cls(*(float(value),) * 4)
        return cls(*(float(v) for v in value))


# --- posteriors ---------------------------------------------------------------


@dataclass
class PosteriorSummary:
    u_hat: float
    log_u_hat: float
    score_mean: np.ndarray
    score_cov_bar: np.ndarray
    w_first: np.ndarray
    w_second: np.ndarray
    delta: float


@dataclass
class Posteriors:
    """Batched E-step output; row ``i`` belongs to subject ``i``."""

    u_hat: np.ndarray
    log_u_hat: np.ndarray
    score_mean: np.ndarray
    score_cov_bar: np.ndarray
    delta: np.ndarray
    logdet: np.ndarray
    d: np.ndarray

    @property
    def w_first(self) -> np.ndarray:
        return self.u_hat[:, None] * self.score_mean

    @property
    def w_second(self) -> np.ndarray:
        mm = self.score_mean[:, :, None] * self.score_mean[:, None, :]
        return self.u_hat[:, None, None] * mm + self.score_cov_bar

    def __len__(self) -> int:
        return self.u_hat.size

    def to_list(self) -> list[PosteriorSummary]:
        w1, w2 = self.w_first, self.w_second
        return [
            PosteriorSummary(
                float(self.u_hat[i]),
                float(self.log_u_hat[i]),
                self.score_mean[i].copy(),
                self.score_cov_bar[i].copy(),
                w1[i].copy(),
                w2[i].copy(),
                float(self.delta[i]),
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_list(cls, items: Sequence[PosteriorSummary]) -> "Posteriors":
        return cls(
            np.array([p.u_hat for p in items]),
            np.array([p.log_u_hat for p in items]),
            np.array([p.score_mean for p in items]),
            np.array([p.score_cov_bar for p in items]),
            np.array([p.delta for p in items]),
            np.full(len(items), np.nan),
            np.full(len(items), -1),
        )


def _as_batch(posteriors) -> Posteriors:
    if isinstance(posteriors, Posteriors):
        return posteriors
    return Posteriors.from_list(list(posteriors))


def _psd_sqrt(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _residuals(params: ParameterSet, des: _Design):
    ry = des.channels[0].v - des.channels[0].B @ params.theta_mu
    rz = des.channels[1].v - des.channels[1].B @ params.theta_nu
    # padded rows have B = 0 and v = 0, so their residual is already 0
    return ry, rz


def _batched_posterior(params: ParameterSet, des: _Design, ids=None) -> Posteriors:
    cy, cz = des.channels
    ka, kb = params.k_alpha, params.k_beta
    ry, rz = _residuals(params, des)
    Ay = cy.B @ params.Theta_f
    Az = cz.B @ params.Theta_g
    G = np.zeros((des.n, ka + kb, ka + kb))
    AyT, AzT = np.swapaxes(Ay, 1, 2), np.swapaxes(Az, 1, 2)
    G[:, :ka, :ka] = (AyT @ Ay) / params.sigma2_eps
    G[:, ka:, ka:] = (AzT @ Az) / params.sigma2_xi
    h = np.concatenate(
        [(AyT @ ry[..., None])[..., 0] / params.sigma2_eps, (AzT @ rz[..., None])[..., 0] / params.sigma2_xi],
        axis=1,
    )
    s = np.sum(ry * ry, axis=1) / params.sigma2_eps + np.sum(rz * rz, axis=1) / params.sigma2_xi
    S = _psd_sqrt(params.sigma_ab())
    M = np.eye(ka + kb)[None] + S[None] @ G @ S[None]
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        bad = [i for i in range(des.n) if np.any(np.linalg.eigvalsh(M[i]) <= 0)]
        who = ids[bad[0]] if ids is not None and bad else (bad[0] if bad else "?")
        raise NumericalError(f"marginal covariance not positive definite for subject {who}")
    Linv = np.linalg.inv(L)
    Minv = np.swapaxes(Linv, 1, 2) @ Linv
    cov_bar = S[None] @ Minv @ S[None]
    cov_bar = 0.5 * (cov_bar + np.swapaxes(cov_bar, 1, 2))
    mean = (cov_bar @ h[..., None])[..., 0]
    delta = np.clip(s - np.sum(h * mean, axis=1), 0.0, None)
    logdet = (
        cy.counts * math.log(params.sigma2_eps)
        + cz.counts * math.log(params.sigma2_xi)
        + 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    )
    fam = params.family
    u_hat, log_u_hat = smnfamily.u_moments(fam.kind, fam.gamma, delta, des.d)
    return Posteriors(u_hat, log_u_hat, mean, cov_bar, delta, logdet, des.d.copy())


def _ids(dataset: PairedDataset) -> list[str]:
    return [s.id for s in dataset.subjects]


# --- operations -----------------------------------------------------------------


def marginal_covariance(params: ParameterSet, basis: OrthonormalBasis, subject: SubjectData):
    """Dense ``Sigma_i`` and score/data cross-covariance ``Sigma_ab,i``."""
    By = design_matrix(basis, subject.times_y)
    Bz = design_matrix(basis, subject.times_z)
    Fy = By @ params.Theta_f
    Gz = Bz @ params.Theta_g
    Dy = np.diag(params.D_alpha)
    Dz = np.diag(params.D_beta)
    yy = Fy @ Dy @ Fy.T + params.sigma2_eps * np.eye(subject.n_y)
    yz = Fy @ params.C @ Gz.T
    zz = Gz @ Dz @ Gz.T + params.sigma2_xi * np.eye(subject.n_z)
    sigma_i = np.block([[yy, yz], [yz.T, zz]])
    ka, kb = params.k_alpha, params.k_beta
    proj = np.zeros((ka + kb, subject.n_y + subject.n_z))
    proj[:ka, : subject.n_y] = Fy.T
    proj[ka:, subject.n_y :] = Gz.T
    return sigma_i, params.sigma_ab() @ proj


def e_step(params: ParameterSet, basis: OrthonormalBasis, dataset: PairedDataset) -> list[PosteriorSummary]:
    return _batched_posterior(params, _design(dataset, basis), _ids(dataset)).to_list()


def _expected_sq(params: ParameterSet, des: _Design, post: Posteriors):
    """Per-subject E[u ||r - A a||^2] for both channels under ``post``'s moments."""
    ka = params.k_alpha
    w1, w2 = post.w_first, post.w_second
    ry, rz = _residuals(params, des)
    out = []
    for ch, r, Theta, sl in ((des.channels[0], ry, params.Theta_f, slice(0, ka)), (des.channels[1], rz, params.Theta_g, slice(ka, None))):
        A = ch.B @ Theta
        AT = np.swapaxes(A, 1, 2)
        AtA = AT @ A
        Atr = (AT @ r[..., None])[..., 0]
        val = (
            post.u_hat * np.sum(r * r, axis=1)
            - 2.0 * np.sum(Atr * w1[:, sl], axis=1)
            + np.sum(AtA * w2[:, sl, sl], axis=(1, 2))
        )
        out.append(val)
    return out


def m_step_variances(params: ParameterSet, basis: OrthonormalBasis, dataset: PairedDataset, posteriors):
    des = _design(dataset, basis)
    post = _as_batch(posteriors)
    ny, nz = des.channels[0].counts.sum(), des.channels[1].counts.sum()
    if ny == 0 or nz == 0:
        raise DataError("a channel has no observations in the whole dataset")
    ey, ez = _expected_sq(params, des, post)
    s_eps = float(np.sum(ey) / ny)
    s_xi = float(np.sum(ez) / nz)
    if s_eps < SIGMA2_FLOOR or s_xi < SIGMA2_FLOOR:
        log.warning("error variance hit the floor %.1e", SIGMA2_FLOOR)
    return max(s_eps, SIGMA2_FLOOR), max(s_xi, SIGMA2_FLOOR)


def _chol_solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        return cho_solve(cho_factor(0.5 * (A + A.T)), b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular system in {what}") from exc


def m_step_means(params: ParameterSet, basis: OrthonormalBasis, dataset: PairedDataset, posteriors, lambdas):
    des = _design(dataset, basis)
    post = _as_batch(posteriors)
    lam = Lambdas.coerce(lambdas)
    omega = basis.omega
    n = des.n
    ka = params.k_alpha
    w1 = post.w_first
    out = []
    for ch, Theta, w, s2, lmb in (
        (des.channels[0], params.Theta_f, w1[:, :ka], params.sigma2_eps, lam.mu),
        (des.channels[1], params.Theta_g, w1[:, ka:], params.sigma2_xi, lam.nu),
    ):
        lhs = ch.weighted_gram(post.u_hat) + n * s2 * lmb * omega
        rhs = post.u_hat @ ch.Btv - np.sum(ch.BtB @ (w @ Theta.T)[..., None], axis=0)[:, 0]
        out.append(_chol_solve(lhs, rhs, "mean update"))
    return out[0], out[1]


def m_step_pcs_and_cov(
    params: ParameterSet,
    basis: OrthonormalBasis,
    dataset: PairedDataset,
    posteriors,
    lambdas,
    pc_weighting: str = "none",
):
    """Average weighted second moments, then Gauss-Seidel column updates.

    ``pc_weighting="score_variance"`` multiplies each column's penalty by the
    current score variance ``D[j]``; the default leaves it out, which makes
    every column update an exact minimiser of the Q-function.
    """
    des = _design(dataset, basis)
    post = _as_batch(posteriors)
    lam = Lambdas.coerce(lambdas)
    omega = basis.omega
    n = des.n
    ka = params.k_alpha
    w1, w2 = post.w_first, post.w_second
    sigma_star = np.mean(w2, axis=0)
    sigma_star = 0.5 * (sigma_star + sigma_star.T)
    thetas = []
    for ch, theta0, Theta, offset, s2, lmb, dvar in (
        (des.channels[0], params.theta_mu, params.Theta_f, 0, params.sigma2_eps, lam.f, params.D_alpha),
        (des.channels[1], params.theta_nu, params.Theta_g, ka, params.sigma2_xi, lam.g, params.D_beta),
    ):
        Theta = Theta.copy()
        Btr = ch.Btv - ch.BtB @ theta0
        k = Theta.shape[1]
        for j in range(k):
            jj = offset + j
            weight = dvar[j] if pc_weighting == "score_variance" else 1.0
            lhs = ch.weighted_gram(w2[:, jj, jj]) + n * s2 * weight * lmb * omega
            rhs = Btr.T @ w1[:, jj]
            for l in range(k):
                if l != j:
                    rhs -= ch.weighted_gram(w2[:, offset + l, jj]) @ Theta[:, l]
            Theta[:, j] = _chol_solve(lhs, rhs, f"PC column {j + 1} update")
        thetas.append(Theta)
    return thetas[0], thetas[1], sigma_star


def _orthonormalize_block(Theta_star: np.ndarray, V: np.ndarray):
    Q, R = np.linalg.qr(Theta_star)
    K = R @ V @ R.T
    w, E = np.linalg.eigh(0.5 * (K + K.T))
    order = np.argsort(w)[::-1]
    w, E = w[order], E[:, order]
    Theta = Q @ E
    flip = np.sign(Theta[np.argmax(np.abs(Theta), axis=0), np.arange(Theta.shape[1])])
    flip[flip == 0] = 1.0
    Theta = Theta * flip
    T = (E * flip).T @ R  # Theta^T Theta_star
    if w.size > 1 and np.sum(np.abs(w) < 1e-14) > 1:
        log.warning("rank deficient PC block: tied zero score variances")
    return Theta, np.clip(w, EIG_FLOOR, None), T


def identifiability_rotation(Theta_f_star: np.ndarray, Theta_g_star: np.ndarray, Sigma_ab_star: np.ndarray):
    """Map (Theta*, Sigma*) to orthonormal PC matrices with diagonal, decreasing score variances."""
    ka = Theta_f_star.shape[1]
    V = np.asarray(Sigma_ab_star, dtype=float)
    Theta_f, D_alpha, Tf = _orthonormalize_block(np.asarray(Theta_f_star, float), V[:ka, :ka])
    Theta_g, D_beta, Tg = _orthonormalize_block(np.asarray(Theta_g_star, float), V[ka:, ka:])
    C = Tf @ V[:ka, ka:] @ Tg.T
    return Theta_f, Theta_g, D_alpha, D_beta, C


def penalty(params: ParameterSet, basis: OrthonormalBasis, lambdas) -> float:
    lam = Lambdas.coerce(lambdas)
    om = basis.omega
    return float(
        lam.mu * params.theta_mu @ om @ params.theta_mu
        + lam.nu * params.theta_nu @ om @ params.theta_nu
        + lam.f * np.trace(params.Theta_f.T @ om @ params.Theta_f)
        + lam.g * np.trace(params.Theta_g.T @ om @ params.Theta_g)
    )


def q_function(
    params: ParameterSet,
    posteriors,
    lambdas,
    basis: OrthonormalBasis,
    dataset: PairedDataset,
    sigma_ab: np.ndarray | None = None,
) -> float:
    """Penalised conditional expected complete-data -2 log-likelihood over n, plus PEN.

    ``sigma_ab`` replaces the score covariance assembled from ``D_alpha``,
    ``D_beta`` and ``C``; pass a full matrix to evaluate Q before the
    identifiability rotation.
    """
    des = _design(dataset, basis)
    post = _as_batch(posteriors)
    ny, nz = des.channels[0].counts, des.channels[1].counts
    k = params.k
    ey, ez = _expected_sq(params, des, post)
    sab = params.sigma_ab() if sigma_ab is None else np.asarray(sigma_ab, dtype=float)
    sign, logdet_sab = np.linalg.slogdet(sab)
    if sign <= 0:
        return math.inf
    sab_inv = np.linalg.inv(sab)
    score_quad = np.sum(sab_inv[None] * post.w_second, axis=(1, 2))
    per = (
        ny * math.log(params.sigma2_eps)
        + nz * math.log(params.sigma2_xi)
        - (ny + nz + k) * post.log_u_hat
        + ey / params.sigma2_eps
        + ez / params.sigma2_xi
        + logdet_sab
        + score_quad
    )
    total = float(np.mean(per))
    fam = params.family
    if fam.kind != "normal":
        total += smnfamily.gamma_objective(fam.kind, fam.gamma, post.u_hat, post.log_u_hat) / des.n
    return total + penalty(params, basis, lambdas)


def _objective_from_posterior(params: ParameterSet, post: Posteriors, basis, lambdas) -> float:
    fam = params.family
    kern = smnfamily.log_marginal_kernel(fam.kind, fam.gamma, post.delta, post.d)
    loglik = -0.5 * post.d * LOG_2PI - 0.5 * post.logdet + kern
    return float(-2.0 * np.mean(loglik)) + penalty(params, basis, lambdas)


def penalized_objective(params: ParameterSet, basis: OrthonormalBasis, dataset: PairedDataset, lambdas) -> float:
    des = _design(dataset, basis)
    post = _batched_posterior(params, des, _ids(dataset))
    return _objective_from_posterior(params, post, basis, lambdas)


# --- fitting ------------------------------------------------------------------


@dataclass
class FitOptions:
    lambdas: Lambdas = field(default_factory=Lambdas)
    max_iter: int = 500
    rel_tol: float = 1e-6
    gamma_bounds: tuple[float, float] = DEFAULT_GAMMA_BOUNDS
    gamma: float | None = None
    update_gamma: bool = True
    seed: int = 0
    init: str | ParameterSet = "default"
    pc_weighting: str = "none"
    safeguard: bool = True

    def __post_init__(self):
        self.lambdas = Lambdas.coerce(self.lambdas)
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be at least 1")
        if not self.rel_tol > 0:
            raise InvalidArgumentError("rel_tol must be positive")
        if self.pc_weighting not in ("none", "score_variance"):
            raise InvalidArgumentError(f"unknown pc_weighting {self.pc_weighting!r}")


@dataclass
class FitResult:
    params: ParameterSet
    posteriors: list[PosteriorSummary]
    objective_trace: list[float]
    converged: bool
    iterations: int
    safeguarded_iterations: int = 0
    lambdas: Lambdas = field(default_factory=Lambdas)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    @property
    def family(self) -> MixingFamily:
        return self.params.family


def _top_eig(K: np.ndarray, k: int):
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    order = np.argsort(w)[::-1][:k]
    V = V[:, order]
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    return V * flip, np.clip(w[order], 0.0, None)


def initialize(
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    k_alpha: int,
    k_beta: int,
    family: MixingFamily,
    lambdas=None,
) -> ParameterSet:
    """Deterministic warm start: penalised pooled means, ridge per-subject curves, eigen PCs."""
    des = _design(dataset, basis)
    lam = Lambdas.coerce(lambdas)
    q, n = des.q, des.n
    omega = basis.omega
    out = []
    for ch, lmb, k in ((des.channels[0], lam.mu, k_alpha), (des.channels[1], lam.nu, k_beta)):
        total = max(int(ch.counts.sum()), 1)
        vals = ch.v[ch.B.any(axis=2)] if ch.counts.sum() else np.zeros(1)
        var = float(np.var(vals)) if vals.size > 1 else 1.0
        var = var if var > 0 else 1.0
        BtB = ch.BtB.sum(axis=0)
        theta0 = _chol_solve(BtB + n * var * max(lmb, 1e-8) * omega + 1e-10 * np.trace(BtB) / q * np.eye(q), ch.Btv.sum(axis=0), "initial mean")
        r = ch.v - ch.B @ theta0
        ridge = 0.1 * np.trace(BtB) / (q * n) + 1e-12
        Btr = (np.swapaxes(ch.B, 1, 2) @ r[..., None])[..., 0]
        coefs = np.linalg.solve(ch.BtB + ridge * np.eye(q)[None], Btr[..., None])[..., 0]
        K = coefs.T @ coefs / n
        Theta, D = _top_eig(K, k)
        fitted = (ch.B @ (coefs @ Theta @ Theta.T)[..., None])[..., 0]
        sig = float(np.sum((r - fitted) ** 2) / total)
        sig = max(sig, 1e-6 * var)
        D = np.maximum(D, 1e-6 * var)
        out.append((theta0, Theta, D, sig))
    (tm, Tf, Da, se), (tn, Tg, Db, sx) = out
    if family.kind != "normal" and family.gamma is None:
        family = family.with_gamma(INITIAL_GAMMA[family.kind])
    return ParameterSet(tm, tn, Tf, Tg, Da, Db, np.zeros((k_alpha, k_beta)), se, sx, family)


def _em_step(params, post, des, dataset, basis, lam, options, theta_star_override=None):
    s_eps, s_xi = m_step_variances(params, basis, dataset, post)
    p = params.copy(sigma2_eps=s_eps, sigma2_xi=s_xi)
    tm, tn = m_step_means(p, basis, dataset, post, lam)
    p = p.copy(theta_mu=tm, theta_nu=tn)
    Tf_star, Tg_star, sig_star = m_step_pcs_and_cov(p, basis, dataset, post, lam, options.pc_weighting)
    if theta_star_override is not None:
        Tf_star, Tg_star = theta_star_override
    Tf, Tg, Da, Db, C = identifiability_rotation(Tf_star, Tg_star, sig_star)
    p = p.copy(Theta_f=Tf, Theta_g=Tg, D_alpha=Da, D_beta=Db, C=C)
    fam = params.family
    if fam.kind != "normal" and options.update_gamma:
        try:
            g_new = smnfamily.gamma_update(fam.kind, post.u_hat, post.log_u_hat, options.gamma_bounds)
        except smnfamily.DegenerateUpdateError:
            g_new = fam.gamma
        if smnfamily.gamma_objective(fam.kind, g_new, post.u_hat, post.log_u_hat) <= smnfamily.gamma_objective(
            fam.kind, fam.gamma, post.u_hat, post.log_u_hat
        ):
            p = p.copy(family=fam.with_gamma(g_new))
    return p


def fit(
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    k_alpha: int,
    k_beta: int,
    family_kind: str | MixingFamily,
    options: FitOptions | None = None,
) -> FitResult:
    options = options or FitOptions()
    if k_alpha < 1 or k_beta < 1:
        raise InvalidArgumentError("k_alpha and k_beta must be at least 1")
    if basis.dim <= max(k_alpha, k_beta):
        raise InvalidArgumentError("basis dimension must exceed the number of PCs")
    family = family_kind if isinstance(family_kind, MixingFamily) else MixingFamily(family_kind, options.gamma)
    if options.gamma is not None and family.kind != "normal":
        family = family.with_gamma(options.gamma)
    lam = options.lambdas
    des = _design(dataset, basis)
    ids = _ids(dataset)

    if isinstance(options.init, ParameterSet):
        params = options.init.copy(family=options.init.family if options.init.family.kind == family.kind else family)
        if params.k_alpha != k_alpha or params.k_beta != k_beta:
            raise InvalidArgumentError("initial parameters have the wrong number of PCs")
        if options.gamma is not None and family.kind != "normal":
            params = params.copy(family=family)
    else:
        params = initialize(dataset, basis, k_alpha, k_beta, family, lam)

    post = _batched_posterior(params, des, ids)
    obj = _objective_from_posterior(params, post, basis, lam)
    if not math.isfinite(obj):
        raise NumericalError("objective is not finite at the initial parameters (iteration 0)")
    trace = [obj]
    converged = False
    safeguarded = 0
    it = 0
    for it in range(1, options.max_iter + 1):
        cand = _em_step(params, post, des, dataset, basis, lam, options)
        cand_post = _batched_posterior(cand, des, ids)
        cand_obj = _objective_from_posterior(cand, cand_post, basis, lam)
        if options.safeguard and not (cand_obj <= obj + 1e-13 * abs(obj)):
            # keep the current PC subspace; every block is then an exact
            # conditional minimiser of Q and the rotation is orthogonal
            safe = _em_step(params, post, des, dataset, basis, lam, options, (params.Theta_f, params.Theta_g))
            safe_post = _batched_posterior(safe, des, ids)
            safe_obj = _objective_from_posterior(safe, safe_post, basis, lam)
            if safe_obj < cand_obj or not math.isfinite(cand_obj):
                cand, cand_post, cand_obj = safe, safe_post, safe_obj
                safeguarded += 1
        if not math.isfinite(cand_obj):
            raise NumericalError(f"objective became non-finite at iteration {it}")
        change = abs(obj - cand_obj) / max(abs(obj), 1e-300)
        params, post, obj = cand, cand_post, cand_obj
        trace.append(obj)
        if change < options.rel_tol:
            converged = True
            break
    return FitResult(params, post.to_list(), trace, converged, it, safeguarded, lam)


def _params_of(fit_or_params) -> ParameterSet:
    return fit_or_params.params if isinstance(fit_or_params, FitResult) else fit_or_params


def predict_scores(fit_or_params, basis: OrthonormalBasis, subject: SubjectData):
    """Posterior mean of (alpha, beta) and Sigma_bar for one subject under fitted parameters."""
    params = _params_of(fit_or_params)
    if subject.n_y + subject.n_z == 0:
        raise DataError(f"subject {subject.id!r} has no observations")
    ds = PairedDataset([subject], basis.domain)
    post = _batched_posterior(params, _design(ds, basis), [subject.id])
    return post.score_mean[0], post.score_cov_bar[0]


def predict_curve(fit_or_params, basis: OrthonormalBasis, scores, times, channel: str) -> np.ndarray:
    params = _params_of(fit_or_params)
    scores = np.asarray(scores, dtype=float)
    B = design_matrix(basis, times)
    ch = str(channel).upper()
    if ch == "Y":
        return B @ (params.theta_mu + params.Theta_f @ scores[: params.k_alpha])
    if ch == "Z":
        return B @ (params.theta_nu + params.Theta_g @ scores[params.k_alpha :])
    raise InvalidArgumentError(f"channel must be 'Y' or 'Z', got {channel!r}")


def batched_posteriors(params: ParameterSet, basis: OrthonormalBasis, dataset: PairedDataset) -> Posteriors:
    return _batched_posterior(params, _design(dataset, basis), _ids(dataset))
