"""Integrated absolute error of fitted functions against known truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .model import FitResult, PairedDataset, ParameterSet, batched_posteriors
from .simulation import GroundTruth
from .splinebasis import OrthonormalBasis, design_matrix

log = logging.getLogger(__name__)

N_INTERVALS = 100

__all__ = ["iae", "midpoints", "align_components", "evaluate_fit", "FitReport", "TABLE_COLUMNS"]

TABLE_COLUMNS = ("mu", "nu", "f1", "f2", "g1", "g2", "Y", "Z")


def midpoints(domain: Sequence[float] = (0.0, 1.0), n: int = N_INTERVALS) -> np.ndarray:
    lo, hi = domain
    h = (hi - lo) / n
    return lo + h * (np.arange(n) + 0.5)


def _sample(fn_or_values, t: np.ndarray) -> np.ndarray:
    if callable(fn_or_values):
        return np.asarray(fn_or_values(t), dtype=float) * np.ones_like(t)
    vals = np.asarray(fn_or_values, dtype=float)
    if vals.shape != t.shape:
        raise InvalidArgumentError("sampled values must be given on the 100 interval midpoints")
    return vals


def iae(estimate, truth, domain: Sequence[float] = (0.0, 1.0)) -> float:
    """Midpoint Riemann sum of |estimate - truth| over 100 equal intervals."""
    t = midpoints(domain)
    h = (domain[1] - domain[0]) / N_INTERVALS
    return float(h * np.sum(np.abs(_sample(estimate, t) - _sample(truth, t))))


def align_components(estimated: Sequence, true: Sequence, domain: Sequence[float] = (0.0, 1.0)) -> np.ndarray:
    if len(estimated) != len(true):
        raise InvalidArgumentError("component counts differ")
    t = midpoints(domain)
    signs = np.ones(len(true))
    for j, (e, f) in enumerate(zip(estimated, true)):
        ev, fv = _sample(e, t), _sample(f, t)
        if np.sum(np.abs(-ev - fv)) < np.sum(np.abs(ev - fv)):
            signs[j] = -1.0
    return signs


@dataclass
class FitReport:
    """IAE values keyed by column (mu, nu, f1.., g1.., Y, Z); ``scaled`` holds the same values x1000."""

    values: dict[str, float]
    component_mismatch: bool = False
    signs: dict[str, list[float]] = field(default_factory=dict)

    @property
    def scaled(self) -> dict[str, float]:
        return {k: 1000.0 * v for k, v in self.values.items()}

    def pc_mean(self) -> float:
        keys = [k for k in self.values if k[0] in "fg" and k[1:].isdigit()]
        return float(np.mean([self.values[k] for k in keys]))

    def to_json(self) -> dict:
        return {
            "iae": self.values,
            "iae_x1000": self.scaled,
            "component_mismatch": self.component_mismatch,
            "signs": self.signs,
        }


def _pcs(basis: OrthonormalBasis, Theta: np.ndarray, t: np.ndarray) -> list[np.ndarray]:
    vals = design_matrix(basis, t) @ Theta
    return [vals[:, j] for j in range(Theta.shape[1])]


def evaluate_fit(
    fit: FitResult | ParameterSet,
    truth: GroundTruth,
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    allow_mismatch: bool = False,
) -> FitReport:
    params = fit.params if isinstance(fit, FitResult) else fit
    domain = basis.domain
    t = midpoints(domain)
    B = design_matrix(basis, t)
    mismatch = params.k_alpha != truth.k_alpha or params.k_beta != truth.k_beta
    if mismatch and not allow_mismatch:
        raise InvalidArgumentError(
            f"fit has ({params.k_alpha}, {params.k_beta}) components, truth has ({truth.k_alpha}, {truth.k_beta})"
        )
    values = {"mu": iae(B @ params.theta_mu, truth.mu, domain), "nu": iae(B @ params.theta_nu, truth.nu, domain)}
    signs = {}
    zero = lambda x: np.zeros_like(x)
    for name, Theta, fns in (("f", params.Theta_f, truth.f), ("g", params.Theta_g, truth.g)):
        est = _pcs(basis, Theta, t)
        k = max(len(est), len(fns))
        est = est + [np.zeros_like(t)] * (k - len(est))
        tru = list(fns) + [zero] * (k - len(fns))
        s = align_components(est, tru, domain)
        signs[name] = s.tolist()
        for j in range(k):
            values[f"{name}{j + 1}"] = iae(s[j] * est[j], tru[j], domain)
    if mismatch:
        log.warning("component-count mismatch: extra components compared with the zero function")

    post = batched_posteriors(params, basis, dataset)
    index = {sid: i for i, sid in enumerate(truth.subject_ids)}
    per = {"Y": [], "Z": []}
    ka = params.k_alpha
    for row, subj in enumerate(dataset.subjects):
        i = index[subj.id]
        sc = post.score_mean[row]
        per["Y"].append(iae(B @ (params.theta_mu + params.Theta_f @ sc[:ka]), truth.curve(i, "Y", t), domain))
        per["Z"].append(iae(B @ (params.theta_nu + params.Theta_g @ sc[ka:]), truth.curve(i, "Z", t), domain))
    values["Y"] = float(np.mean(per["Y"]))
    values["Z"] = float(np.mean(per["Z"]))
    return FitReport(values, mismatch, signs)
