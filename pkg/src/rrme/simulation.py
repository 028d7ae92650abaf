"""Synthetic paired sparse curves with known ground truth on [0, 1].

Five generating scenarios:

1. normal scores and errors (u = 1)
2. u ~ Gamma(gamma/2, rate gamma/2), i.e. multivariate t
3. u ~ Beta(gamma, 1), i.e. slash
4. scenario 1 plus 5% of all observations shifted by +-Uniform(8, 10)
5. scenario 1 plus 5% of subjects with Uniform(-4, 4) added to each true score
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError
from .model import PairedDataset, SubjectData

DOMAIN = (0.0, 1.0)
SIGMA_AB = np.array(
    [
        [1.0, 0.0, -0.4, 0.12],
        [0.0, 0.25, 0.15, -0.05],
        [-0.4, 0.15, 1.44, 0.0],
        [0.12, -0.05, 0.0, 0.36],
    ]
)
N_TRIALS = 15
P_OBS = 0.9
CONTAMINATION_RATE = 0.05

_S5 = math.sqrt(5.0)
_S15 = math.sqrt(15.0)


def mu(t):
    t = np.asarray(t, dtype=float)
    return 2.5 + 2.5 * t + 2.5 * np.exp(-20.0 * (t - 0.6) ** 2)


def nu(t):
    t = np.asarray(t, dtype=float)
    return 7.5 - 1.5 * t - 2.5 * np.exp(-20.0 * (t - 0.3) ** 2)


def f1(t):
    t = np.asarray(t, dtype=float)
    return _S15 / (1.0 + _S5) * (t**2 + 1.0 / _S5)


def f2(t):
    t = np.asarray(t, dtype=float)
    return _S15 / (_S5 - 1.0) * (t**2 - 1.0 / _S5)


def g1(t):
    return math.sqrt(2.0) * np.cos(2.0 * np.pi * np.asarray(t, dtype=float))


def g2(t):
    return math.sqrt(2.0) * np.sin(2.0 * np.pi * np.asarray(t, dtype=float))


@dataclass
class GroundTruth:
    mu: Callable
    nu: Callable
    f: tuple[Callable, ...]
    g: tuple[Callable, ...]
    sigma_ab: np.ndarray
    scores: np.ndarray | None = None
    u: np.ndarray | None = None
    subject_ids: list[str] = field(default_factory=list)
    contamination: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def k_alpha(self) -> int:
        return len(self.f)

    @property
    def k_beta(self) -> int:
        return len(self.g)

    def curve(self, i: int, channel: str, t) -> np.ndarray:
        """True individual curve of subject ``i``."""
        s = self.scores[i]
        t = np.asarray(t, dtype=float)
        if channel.upper() == "Y":
            return self.mu(t) + sum(s[j] * fn(t) for j, fn in enumerate(self.f))
        return self.nu(t) + sum(s[self.k_alpha + j] * fn(t) for j, fn in enumerate(self.g))

    def to_json(self, grid_size: int = 101) -> dict:
        grid = np.linspace(*DOMAIN, grid_size)
        return {
            "format_version": 1,
            "config": self.config,
            "sigma_ab": self.sigma_ab.tolist(),
            "subject_ids": list(self.subject_ids),
            "u": None if self.u is None else self.u.tolist(),
            "scores": None if self.scores is None else self.scores.tolist(),
            "contamination": self.contamination,
            "grid": grid.tolist(),
            "functions": {
                "mu": self.mu(grid).tolist(),
                "nu": self.nu(grid).tolist(),
                **{f"f{j + 1}": fn(grid).tolist() for j, fn in enumerate(self.f)},
                **{f"g{j + 1}": fn(grid).tolist() for j, fn in enumerate(self.g)},
            },
            "curves": None
            if self.scores is None
            else {
                sid: {"Y": self.curve(i, "Y", grid).tolist(), "Z": self.curve(i, "Z", grid).tolist()}
                for i, sid in enumerate(self.subject_ids)
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        truth = true_model()
        truth.scores = None if data.get("scores") is None else np.asarray(data["scores"], dtype=float)
        truth.u = None if data.get("u") is None else np.asarray(data["u"], dtype=float)
        truth.subject_ids = list(data.get("subject_ids", []))
        truth.contamination = data.get("contamination", {})
        truth.config = data.get("config", {})
        return truth


def true_model() -> GroundTruth:
    return GroundTruth(mu, nu, (f1, f2), (g1, g2), SIGMA_AB.copy())


def _draw_u(rng: np.random.Generator, scenario: int, gamma: float | None) -> float:
    if scenario == 2:
        return float(rng.gamma(gamma / 2.0, 2.0 / gamma))
    if scenario == 3:
        return float(rng.beta(gamma, 1.0))
    return 1.0


def simulate(scenario: int, gamma: float | None, sigma2: float, n: int, seed: int):
    """Generate ``n`` subjects; returns ``(PairedDataset, GroundTruth)``.

    Both channels of a subject share one set of observation times. Each
    subject and the contamination step draw from their own child stream of
    ``SeedSequence(seed)``.
    """
    if scenario not in (1, 2, 3, 4, 5):
        raise InvalidArgumentError(f"scenario must be 1..5, got {scenario!r}")
    if scenario in (2, 3) and (gamma is None or not gamma > 0):
        raise InvalidArgumentError(f"scenario {scenario} needs a positive gamma")
    if not sigma2 > 0:
        raise InvalidArgumentError("sigma2 must be positive")
    if int(n) != n or n < 1:
        raise InvalidArgumentError("n must be a positive integer")
    n = int(n)
    truth = true_model()
    chol = np.linalg.cholesky(truth.sigma_ab)
    streams = np.random.SeedSequence(seed).spawn(n + 1)
    scores = np.empty((n, 4))
    us = np.empty(n)
    times, noise_y, noise_z = [], [], []
    for i in range(n):
        rng = np.random.default_rng(streams[i])
        count = 1 + int(rng.binomial(N_TRIALS, P_OBS))
        t = np.concatenate([[0.0], rng.uniform(0.0, 1.0, count - 1)])
        u = _draw_u(rng, scenario, gamma)
        scores[i] = chol @ rng.standard_normal(4) / math.sqrt(u)
        sd = math.sqrt(sigma2 / u)
        noise_y.append(sd * rng.standard_normal(count))
        noise_z.append(sd * rng.standard_normal(count))
        times.append(t)
        us[i] = u

    ids = [f"s{i:04d}" for i in range(n)]
    contamination: dict = {"scenario": scenario, "points": [], "subjects": []}
    rng_c = np.random.default_rng(streams[n])
    if scenario == 5:
        n_bad = max(1, int(math.floor(CONTAMINATION_RATE * n)))
        chosen = np.sort(rng_c.choice(n, size=n_bad, replace=False))
        for i in chosen:
            shift = rng_c.uniform(-4.0, 4.0, 4)
            scores[i] += shift
            contamination["subjects"].append({"subject": ids[i], "index": int(i), "score_shift": shift.tolist()})
    truth.scores = scores
    truth.u = us
    truth.subject_ids = ids

    values_y = [truth.curve(i, "Y", times[i]) + noise_y[i] for i in range(n)]
    values_z = [truth.curve(i, "Z", times[i]) + noise_z[i] for i in range(n)]

    if scenario == 4:
        counts = np.array([t.size for t in times])
        total = 2 * int(counts.sum())
        n_bad = max(1, int(math.floor(CONTAMINATION_RATE * total)))
        picks = np.sort(rng_c.choice(total, size=n_bad, replace=False))
        offsets = np.concatenate([[0], np.cumsum(counts)])
        half = int(counts.sum())
        for p in picks:
            channel = "Y" if p < half else "Z"
            flat = p if p < half else p - half
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            shift = float(rng_c.uniform(8.0, 10.0) * (1.0 if rng_c.random() < 0.5 else -1.0))
            (values_y if channel == "Y" else values_z)[i][j] += shift
            contamination["points"].append({"subject": ids[i], "channel": channel, "index": j, "shift": shift})

    subjects = [SubjectData(ids[i], times[i], values_y[i], times[i].copy(), values_z[i]) for i in range(n)]
    truth.contamination = contamination
    truth.config = {"scenario": scenario, "gamma": gamma, "sigma2": sigma2, "n": n, "seed": seed}
    return PairedDataset(subjects, DOMAIN), truth
