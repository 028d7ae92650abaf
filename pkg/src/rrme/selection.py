"""Within-subject cross-validation, penalty search and PC-count selection.

Held-out points are individual observations inside a subject's curve. A fold
plan labels every observation with a fold in ``1..K`` or with ``0`` (never
held out). Penalties are searched on ``log10 lambda`` with a Nelder-Mead
simplex; PC counts are chosen with the S(r) rule, the smallest ``k_alpha +
k_beta`` whose CV is within a factor ``1 + r`` of the best.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, RRMEError, SelectionFailedError
from .model import (
    FitOptions,
    Lambdas,
    PairedDataset,
    ParameterSet,
    batched_posteriors,
    fit,
)
from .smnfamily import MixingFamily
from .splinebasis import OrthonormalBasis, design_matrix

log = logging.getLogger(__name__)

LOG10_BOX = (-8.0, 6.0)
DEFAULT_GRID = tuple((a, b) for a in (1, 2, 3) for b in (1, 2, 3))

__all__ = [
    "FoldPlan",
    "CvReport",
    "NelderMeadOptions",
    "NelderMeadResult",
    "SearchOptions",
    "make_folds",
    "cv_score",
    "nelder_mead",
    "select_penalties",
    "select_pc_numbers",
    "s_r_rule",
    "PcSelection",
]


# --- folds --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """``labels_y[i][j]`` is the fold of subject ``i``'s ``j``-th Y point (0 = never held out)."""

    K: int
    seed: int
    labels_y: tuple[np.ndarray, ...]
    labels_z: tuple[np.ndarray, ...]

    def held_out(self, fold: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [lab == fold for lab in self.labels_y], [lab == fold for lab in self.labels_z]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FoldPlan):
            return NotImplemented
        same = lambda a, b: len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
        return self.K == other.K and same(self.labels_y, other.labels_y) and same(self.labels_z, other.labels_z)


def _assign(rng: np.random.Generator, times: np.ndarray, K: int) -> np.ndarray:
    # points sharing a time form one group so a repeated measurement never
    # stays in training while its twin is held out
    uniq, inverse = np.unique(times, return_inverse=True)
    m = uniq.size
    if m < 2:
        return np.zeros(times.size, dtype=int)
    # a shuffled round-robin keeps fold sizes within one of each other and
    # never empties a subject-channel because each fold gets at most ceil(m/K) < m groups
    offset = int(rng.integers(K))
    return (1 + (np.arange(m) + offset)[rng.permutation(m)] % K)[inverse]


def make_folds(dataset: PairedDataset, K: int, seed: int) -> FoldPlan:
    if int(K) != K or K < 2:
        raise InvalidArgumentError(f"K must be an integer >= 2, got {K!r}")
    K = int(K)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ly, lz = [], []
    for s in dataset.subjects:
        ly.append(_assign(rng, s.times_y, K))
        lz.append(_assign(rng, s.times_z, K))
    return FoldPlan(K, seed, tuple(ly), tuple(lz))


# --- CV score -----------------------------------------------------------------


@dataclass
class CvReport:
    mae_y: float
    mae_z: float
    mae_combined: float
    per_fold: list[dict] = field(default_factory=list)
    n_held_y: int = 0
    n_held_z: int = 0

    def to_json(self) -> dict:
        return {
            "mae_y": self.mae_y,
            "mae_z": self.mae_z,
            "mae_combined": self.mae_combined,
            "n_held_y": self.n_held_y,
            "n_held_z": self.n_held_z,
            "per_fold": self.per_fold,
        }


def _training_set(dataset: PairedDataset, held_y, held_z) -> PairedDataset:
    subs = [s.subset(~hy, ~hz) for s, hy, hz in zip(dataset.subjects, held_y, held_z)]
    return PairedDataset(subs, dataset.domain)


def _mean(x: list[float]) -> float:
    return float(np.mean(x)) if x else math.nan


def cv_score(
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    k_alpha: int,
    k_beta: int,
    family: str | MixingFamily,
    lambdas,
    folds: FoldPlan,
    fit_options: FitOptions | None = None,
    warm_start: ParameterSet | None = None,
) -> CvReport:
    """K-fold within-subject CV with mean absolute error.

    Each fold is fitted on the retained points; held-out values are predicted
    from the posterior score mean given the subject's retained points.
    ``warm_start`` seeds every fold fit (typically a full-data fit).
    """
    if len(folds.labels_y) != dataset.n:
        raise InvalidArgumentError("fold plan does not match the dataset")
    base = fit_options or FitOptions()
    opts = FitOptions(**{**base.__dict__, "lambdas": Lambdas.coerce(lambdas)})
    if warm_start is not None:
        opts.init = warm_start
    err_y: list[float] = []
    err_z: list[float] = []
    per_fold = []
    for k in range(1, folds.K + 1):
        held_y, held_z = folds.held_out(k)
        if not any(h.any() for h in held_y) and not any(h.any() for h in held_z):
            continue
        train = _training_set(dataset, held_y, held_z)
        try:
            res = fit(train, basis, k_alpha, k_beta, family, opts)
        except RRMEError as exc:
            raise type(exc)(f"fold {k}: {exc}") from exc
        p = res.params
        post = batched_posteriors(p, basis, train)
        ey, ez = [], []
        for i, s in enumerate(dataset.subjects):
            sc = post.score_mean[i]
            if held_y[i].any():
                pred = design_matrix(basis, s.times_y[held_y[i]]) @ (p.theta_mu + p.Theta_f @ sc[: p.k_alpha])
                ey.extend(np.abs(s.values_y[held_y[i]] - pred).tolist())
            if held_z[i].any():
                pred = design_matrix(basis, s.times_z[held_z[i]]) @ (p.theta_nu + p.Theta_g @ sc[p.k_alpha :])
                ez.extend(np.abs(s.values_z[held_z[i]] - pred).tolist())
        per_fold.append(
            {"fold": k, "mae_y": _mean(ey), "mae_z": _mean(ez), "iterations": res.iterations, "converged": res.converged}
        )
        err_y.extend(ey)
        err_z.extend(ez)
    if not err_y and not err_z:
        raise InvalidArgumentError("fold plan holds out no observations")
    return CvReport(_mean(err_y), _mean(err_z), _mean(err_y + err_z), per_fold, len(err_y), len(err_z))


# --- Nelder-Mead ----------------------------------------------------------------


@dataclass
class NelderMeadOptions:
    step: float = 0.5
    max_evals: int = 200
    tol: float = 1e-3
    bounds: tuple[float, float] | None = None
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5


@dataclass
class NelderMeadResult:
    x: np.ndarray
    value: float
    evaluations: int
    converged: bool
    history: list[tuple[list[float], float]] = field(default_factory=list)


def nelder_mead(objective: Callable[[np.ndarray], float], x0, options: NelderMeadOptions | None = None) -> NelderMeadResult:
    """Downhill simplex minimiser; NaN objective values count as +inf."""
    opt = options or NelderMeadOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    if d < 1:
        raise InvalidArgumentError("need at least one coordinate")
    lo, hi = opt.bounds if opt.bounds is not None else (-math.inf, math.inf)
    history: list[tuple[list[float], float]] = []
    best = [None, math.inf]

    def f(x):
        x = np.clip(x, lo, hi)
        v = float(objective(x.copy()))
        if math.isnan(v):
            v = math.inf
        history.append((x.tolist(), v))
        if v < best[1] or best[0] is None:
            best[0], best[1] = x.copy(), v
        return x, v

    x0, f0 = f(x0)
    if not math.isfinite(f0):
        raise InvalidArgumentError("objective is not finite at the starting point")
    simplex = [x0]
    values = [f0]
    for j in range(d):
        x = x0.copy()
        x[j] += opt.step
        if x[j] > hi:
            x[j] = x0[j] - opt.step
        x, v = f(x)
        simplex.append(x)
        values.append(v)
    S = np.array(simplex)
    F = np.array(values)

    def diameter():
        return float(np.max(np.linalg.norm(S[:, None, :] - S[None, :, :], axis=2)))

    converged = False
    while True:
        order = np.argsort(F, kind="stable")
        S, F = S[order], F[order]
        if diameter() < opt.tol:
            converged = True
            break
        if len(history) >= opt.max_evals:
            break
        centroid = S[:-1].mean(axis=0)
        xr, fr = f(centroid + opt.reflection * (centroid - S[-1]))
        if fr < F[0]:
            xe, fe = f(centroid + opt.expansion * (xr - centroid))
            S[-1], F[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < F[-2]:
            S[-1], F[-1] = xr, fr
            continue
        if fr < F[-1]:
            xc, fc = f(centroid + opt.contraction * (xr - centroid))
            if fc <= fr:
                S[-1], F[-1] = xc, fc
                continue
        else:
            xc, fc = f(centroid + opt.contraction * (S[-1] - centroid))
            if fc < F[-1]:
                S[-1], F[-1] = xc, fc
                continue
        for j in range(1, d + 1):
            S[j], F[j] = f(S[0] + opt.shrink * (S[j] - S[0]))
    x, v = (S[0], F[0]) if F[0] <= best[1] else (best[0], best[1])
    return NelderMeadResult(np.asarray(x, dtype=float), float(v), len(history), converged, history)


# --- penalty search -------------------------------------------------------------


@dataclass
class SearchOptions:
    """Penalty-search settings; coordinates are log10 lambda in (mu, nu, f, g) order."""

    start: float | Sequence[float] = -2.0
    box: tuple[float, float] = LOG10_BOX
    nelder_mead: NelderMeadOptions = field(default_factory=NelderMeadOptions)
    fit: FitOptions = field(default_factory=FitOptions)
    warm_start: bool = True


@dataclass
class PenaltySearch:
    lambdas: Lambdas
    report: CvReport
    evaluations: int
    history: list[tuple[list[float], float]]


def select_penalties(
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    k_alpha: int,
    k_beta: int,
    family: str | MixingFamily,
    K: int = 10,
    seed: int = 0,
    search_options: SearchOptions | None = None,
    folds: FoldPlan | None = None,
) -> tuple[Lambdas, CvReport]:
    """Nelder-Mead on log10 lambda with a fixed fold plan; returns the best lambdas and their CV report."""
    res = _search(dataset, basis, k_alpha, k_beta, family, K, seed, search_options, folds)
    return res.lambdas, res.report


def _search(dataset, basis, k_alpha, k_beta, family, K, seed, search_options, folds) -> PenaltySearch:
    so = search_options or SearchOptions()
    folds = folds if folds is not None else make_folds(dataset, K, seed)
    start = np.broadcast_to(np.asarray(so.start, dtype=float), (4,)).copy()
    nm_opts = NelderMeadOptions(**{**so.nelder_mead.__dict__, "bounds": tuple(so.box)})
    reports: dict[tuple, CvReport] = {}

    def objective(z):
        lam = Lambdas(*(10.0**z))
        try:
            # folds start from the full-data fit at the same lambdas, so the
            # score depends on lambda alone and fold fits converge quickly
            warm = None
            if so.warm_start:
                warm = fit(dataset, basis, k_alpha, k_beta, family, FitOptions(**{**so.fit.__dict__, "lambdas": lam})).params
            rep = cv_score(dataset, basis, k_alpha, k_beta, family, lam, folds, so.fit, warm)
        except RRMEError as exc:
            log.info("CV evaluation failed at log10 lambda %s: %s", z.tolist(), exc)
            return math.inf
        reports[tuple(z.tolist())] = rep
        return rep.mae_combined

    try:
        nm = nelder_mead(objective, start, nm_opts)
    except InvalidArgumentError as exc:
        raise SelectionFailedError(f"penalty search could not start: {exc}") from exc
    if not math.isfinite(nm.value):
        raise SelectionFailedError("every CV evaluation failed")
    return PenaltySearch(Lambdas(*(10.0**nm.x)), reports[tuple(nm.x.tolist())], nm.evaluations, nm.history)


# --- PC numbers -------------------------------------------------------------------


def s_r_rule(table: dict[tuple[int, int], float], r: float) -> tuple[int, int]:
    """Smallest k_alpha + k_beta with CV <= (1 + r) min CV; ties by CV, then k_alpha.

    Cells whose value is not finite are treated as unavailable.
    """
    if r < 0:
        raise InvalidArgumentError("r must be non-negative")
    avail = {k: v for k, v in table.items() if v is not None and math.isfinite(v)}
    if not avail:
        raise SelectionFailedError("no grid cell has a CV value")
    cv_min = min(avail.values())
    members = [k for k, v in avail.items() if v <= (1.0 + r) * cv_min]
    return min(members, key=lambda k: (k[0] + k[1], avail[k], k[0]))


@dataclass
class PcSelection:
    k_alpha: int
    k_beta: int
    table: dict[tuple[int, int], float]
    lambdas: dict[tuple[int, int], Lambdas]
    reports: dict[tuple[int, int], CvReport]
    r: float

    def to_json(self) -> dict:
        cells = []
        for key in sorted(self.table):
            lam = self.lambdas.get(key)
            cells.append(
                {
                    "k_alpha": key[0],
                    "k_beta": key[1],
                    "cv": self.table[key] if math.isfinite(self.table[key]) else None,
                    "cv_x1000": 1000.0 * self.table[key] if math.isfinite(self.table[key]) else None,
                    "lambdas": None if lam is None else dict(zip(("mu", "nu", "f", "g"), lam.as_tuple())),
                }
            )
        return {"selected": {"k_alpha": self.k_alpha, "k_beta": self.k_beta}, "r": self.r, "cells": cells}


def select_pc_numbers(
    dataset: PairedDataset,
    basis: OrthonormalBasis,
    family: str | MixingFamily,
    grid: Sequence[tuple[int, int]] = DEFAULT_GRID,
    r: float = 0.05,
    K: int = 10,
    seed: int = 0,
    search_options: SearchOptions | None = None,
    fixed_lambdas=None,
    workers: int = 1,
) -> PcSelection:
    """Run the penalty search in every grid cell, then apply the S(r) rule.

    With ``fixed_lambdas`` the search is skipped and every cell is scored at
    those penalties; a mapping from cell to penalties fixes them per cell. Cells whose fits fail are reported as unavailable.
    ``workers > 1`` evaluates grid cells on a thread pool.
    """
    grid = [tuple(int(v) for v in g) for g in grid]
    if not grid:
        raise InvalidArgumentError("grid must be nonempty")
    if r < 0:
        raise InvalidArgumentError("r must be non-negative")
    so = search_options or SearchOptions()
    folds = make_folds(dataset, K, seed)
    table: dict[tuple[int, int], float] = {}
    lams: dict[tuple[int, int], Lambdas] = {}
    reports: dict[tuple[int, int], CvReport] = {}

    def run(cell):
        ka, kb = cell
        try:
            if fixed_lambdas is None:
                return select_penalties(dataset, basis, ka, kb, family, K, seed, so, folds)
            lam = Lambdas.coerce(fixed_lambdas[cell] if isinstance(fixed_lambdas, dict) else fixed_lambdas)
            warm = None
            if so.warm_start:
                warm = fit(dataset, basis, ka, kb, family, FitOptions(**{**so.fit.__dict__, "lambdas": lam})).params
            return lam, cv_score(dataset, basis, ka, kb, family, lam, folds, so.fit, warm)
        except RRMEError as exc:
            log.warning("grid cell %s unavailable: %s", cell, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, grid))
    else:
        outcomes = [run(cell) for cell in grid]
    for cell, out in zip(grid, outcomes):
        if out is None:
            table[cell] = math.inf
            continue
        lams[cell], reports[cell] = out
        table[cell] = out[1].mae_combined
    ka, kb = s_r_rule(table, r)
    return PcSelection(ka, kb, table, lams, reports, float(r))
