"""Dataset CSV, parameter files and ground-truth sidecars.

Dataset CSV columns are ``subject_id,channel,time,value`` with channel ``Y``
or ``Z``. Parameter files are JSON with explicit matrix shapes and a format
version; floats are written with ``repr`` so a reload is exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import FitResult, Lambdas, PairedDataset, ParameterSet, SubjectData
from .smnfamily import MixingFamily
from .splinebasis import OrthonormalBasis, make_basis

FORMAT_VERSION = 1
CSV_HEADER = ("subject_id", "channel", "time", "value")

__all__ = [
    "read_dataset",
    "write_dataset",
    "parse_dataset",
    "save_parameters",
    "load_parameters",
    "parameters_to_dict",
    "parameters_from_dict",
    "write_json",
    "read_json",
]


# --- dataset CSV --------------------------------------------------------------


def parse_dataset(lines: Sequence[str], domain: Sequence[float] | None = None, source: str = "<input>") -> PairedDataset:
    """Parse CSV text lines; subjects keep their order of first appearance."""
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{source}: empty file") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise DataError(f"{source}:1: header must be {','.join(CSV_HEADER)}")
    groups: dict[str, dict[str, list]] = {}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise DataError(f"{source}:{line}: expected 4 fields, got {len(row)}")
        sid, ch, t, v = (c.strip() for c in row)
        if ch not in ("Y", "Z"):
            raise DataError(f"{source}:{line}: unknown channel {ch!r} (expected Y or Z)")
        try:
            tf, vf = float(t), float(v)
        except ValueError:
            raise DataError(f"{source}:{line}: time and value must be numbers") from None
        if not (math.isfinite(tf) and math.isfinite(vf)):
            raise DataError(f"{source}:{line}: time and value must be finite")
        g = groups.setdefault(sid, {"Y": ([], []), "Z": ([], [])})
        g[ch][0].append(tf)
        g[ch][1].append(vf)
    if not groups:
        raise DataError(f"{source}: no observations")
    subjects = [SubjectData(sid, g["Y"][0], g["Y"][1], g["Z"][0], g["Z"][1]) for sid, g in groups.items()]
    if domain is None:
        times = np.concatenate([np.concatenate([s.times_y, s.times_z]) for s in subjects])
        lo, hi = float(times.min()), float(times.max())
        if lo == hi:
            hi = lo + 1.0
        domain = (lo, hi)
    return PairedDataset(subjects, tuple(domain))


def read_dataset(path, domain: Sequence[float] | None = None) -> PairedDataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_dataset(text.splitlines(), domain, str(path))


def write_dataset(dataset: PairedDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in dataset.subjects:
            for ch, ts, vs in (("Y", s.times_y, s.values_y), ("Z", s.times_z, s.values_z)):
                for t, v in zip(ts, vs):
                    w.writerow((s.id, ch, repr(float(t)), repr(float(v))))


# --- JSON ---------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def _matrix(a: np.ndarray) -> dict:
    a = np.atleast_2d(a)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unmatrix(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def parameters_to_dict(params: ParameterSet, basis: OrthonormalBasis, fit: FitResult | None = None, extra=None) -> dict:
    out = {
        "format_version": FORMAT_VERSION,
        "basis": basis.spec(),
        "family": {"kind": params.family.kind, "gamma": params.family.gamma},
        "parameters": {
            "theta_mu": params.theta_mu.tolist(),
            "theta_nu": params.theta_nu.tolist(),
            "Theta_f": _matrix(params.Theta_f),
            "Theta_g": _matrix(params.Theta_g),
            "D_alpha": params.D_alpha.tolist(),
            "D_beta": params.D_beta.tolist(),
            "C": _matrix(params.C),
            "sigma2_eps": params.sigma2_eps,
            "sigma2_xi": params.sigma2_xi,
        },
    }
    if fit is not None:
        out["lambdas"] = dict(zip(("mu", "nu", "f", "g"), fit.lambdas.as_tuple()))
        out["convergence"] = {
            "converged": fit.converged,
            "iterations": fit.iterations,
            "objective": fit.objective,
            "safeguarded_iterations": fit.safeguarded_iterations,
        }
    if extra:
        out.update(extra)
    return out


def parameters_from_dict(data: dict) -> tuple[ParameterSet, OrthonormalBasis, dict]:
    try:
        version = data["format_version"]
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported parameter file version {version!r}")
        b = data["basis"]
        basis = make_basis(tuple(b["domain"]), tuple(b["knots"]), int(b["degree"]))
        p = data["parameters"]
        fam = MixingFamily(data["family"]["kind"], data["family"]["gamma"])
        params = ParameterSet(
            np.asarray(p["theta_mu"], dtype=float),
            np.asarray(p["theta_nu"], dtype=float),
            _unmatrix(p["Theta_f"]),
            _unmatrix(p["Theta_g"]),
            np.asarray(p["D_alpha"], dtype=float),
            np.asarray(p["D_beta"], dtype=float),
            _unmatrix(p["C"]),
            float(p["sigma2_eps"]),
            float(p["sigma2_xi"]),
            fam,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed parameter file: {exc!r}") from exc
    meta = {k: v for k, v in data.items() if k not in ("basis", "family", "parameters")}
    return params, basis, meta


def save_parameters(path, params: ParameterSet, basis: OrthonormalBasis, fit: FitResult | None = None, extra=None) -> None:
    write_json(parameters_to_dict(params, basis, fit, extra), path)


def load_parameters(path) -> tuple[ParameterSet, OrthonormalBasis, dict]:
    return parameters_from_dict(read_json(path))


def lambdas_from_meta(meta: dict) -> Lambdas:
    lam = meta.get("lambdas")
    if lam is None:
        raise ConfigError("parameter file records no penalty parameters")
    return Lambdas(**lam)
