"""Run configuration: YAML file, dotted-key overrides and validation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, InvalidArgumentError
from .model import FitOptions, Lambdas
from .smnfamily import DEFAULT_GAMMA_BOUNDS, canonical_kind
from .splinebasis import equispaced_knots

__all__ = ["BasisConfig", "ModelConfig", "PenaltyConfig", "CvConfig", "FitConfig", "RunConfig", "load_config"]


@dataclass
class BasisConfig:
    domain: list[float] | None = None
    knots: list[float] | int = 10
    degree: int = 3

    def interior_knots(self, domain) -> tuple[float, ...]:
        if isinstance(self.knots, int):
            return equispaced_knots(domain, self.knots)
        return tuple(float(k) for k in self.knots)


@dataclass
class ModelConfig:
    family: str = "student_t"
    k_alpha: int = 2
    k_beta: int = 2
    gamma: float | None = None
    gamma_bounds: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMA_BOUNDS))


@dataclass
class PenaltyConfig:
    lambda_mu: float | str = 1e-5
    lambda_nu: float | str = 1e-5
    lambda_f: float | str = 1e-5
    lambda_g: float | str = 1e-5

    @property
    def search(self) -> bool:
        return any(isinstance(v, str) for v in (self.lambda_mu, self.lambda_nu, self.lambda_f, self.lambda_g))

    def lambdas(self) -> Lambdas:
        if self.search:
            raise ConfigError("penalties are set to 'search'; run `select` or give numeric values")
        return Lambdas(self.lambda_mu, self.lambda_nu, self.lambda_f, self.lambda_g)


@dataclass
class CvConfig:
    folds: int = 10
    seed: int = 0
    r: float = 0.05
    grid: list[list[int]] = field(default_factory=lambda: [[a, b] for a in (1, 2, 3) for b in (1, 2, 3)])
    start: float = -2.0
    max_evals: int = 200


@dataclass
class FitConfig:
    max_iter: int = 500
    rel_tol: float = 1e-6
    seed: int = 0


@dataclass
class RunConfig:
    basis: BasisConfig = field(default_factory=BasisConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    threads: int = 1

    def validate(self) -> "RunConfig":
        b, m, p, c, f = self.basis, self.model, self.penalty, self.cv, self.fit
        if b.domain is not None and (len(b.domain) != 2 or not b.domain[0] < b.domain[1]):
            raise ConfigError("basis.domain must be [lo, hi] with lo < hi")
        if isinstance(b.knots, int) and b.knots < 1:
            raise ConfigError("basis.knots must be a positive count or a list of knots")
        if b.degree < 1:
            raise ConfigError("basis.degree must be at least 1")
        try:
            m.family = canonical_kind(m.family)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from exc
        if m.k_alpha < 1 or m.k_beta < 1:
            raise ConfigError("model.k_alpha and model.k_beta must be at least 1")
        if m.gamma is not None and not m.gamma > 0:
            raise ConfigError("model.gamma must be positive")
        if len(m.gamma_bounds) != 2 or not 0 < m.gamma_bounds[0] < m.gamma_bounds[1]:
            raise ConfigError("model.gamma_bounds must satisfy 0 < lo < hi")
        for name in ("lambda_mu", "lambda_nu", "lambda_f", "lambda_g"):
            v = getattr(p, name)
            if isinstance(v, str):
                if v != "search":
                    raise ConfigError(f"penalty.{name} must be a number or 'search'")
            elif not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"penalty.{name} must be finite and non-negative")
        if c.folds < 2:
            raise ConfigError("cv.folds must be at least 2")
        if c.r < 0:
            raise ConfigError("cv.r must be non-negative")
        if not c.grid or any(len(g) != 2 or min(g) < 1 for g in c.grid):
            raise ConfigError("cv.grid must be a nonempty list of [k_alpha, k_beta] pairs")
        if f.max_iter < 1 or not f.rel_tol > 0:
            raise ConfigError("fit.max_iter must be >= 1 and fit.rel_tol > 0")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self

    def fit_options(self, lambdas: Lambdas | None = None) -> FitOptions:
        return FitOptions(
            lambdas=lambdas if lambdas is not None else self.penalty.lambdas(),
            max_iter=self.fit.max_iter,
            rel_tol=self.fit.rel_tol,
            gamma_bounds=tuple(self.model.gamma_bounds),
            gamma=self.model.gamma,
            update_gamma=True,
            seed=self.fit.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def set(self, key: str, raw: Any) -> None:
        """Assign a dotted key such as ``model.k_alpha``; strings are parsed as YAML scalars."""
        value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-5) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        parts = key.split(".")
        target: Any = self
        for part in parts[:-1]:
            if not hasattr(target, part) or part.startswith("_"):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        if name == "grid" and isinstance(value, str):
            value = _parse_grid(value)
        setattr(target, name, _coerce(getattr(target, name), value, key))


def _parse_grid(text: str) -> list[list[int]]:
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like 3x3, got {text!r}") from None
    return [[i, j] for i in range(1, a + 1) for j in range(1, b + 1)]


def _coerce(current, value, key):
    try:
        if isinstance(current, bool):
            return bool(value)
        if isinstance(current, int) and not isinstance(value, (list, str)):
            if int(value) != value:
                raise ValueError
            return int(value)
        if isinstance(current, float) and not isinstance(value, str):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key}") from None
    return value


def _merge(cfg: RunConfig, data: dict, prefix: str = "") -> None:
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            _merge(cfg, v, key + ".")
        else:
            cfg.set(key, v)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        _merge(cfg, data)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg.validate()
