"""Command-line front end.

Subcommands: ``simulate``, ``fit``, ``predict``, ``select``, ``evaluate``, ``cv``.
Errors are reported on stderr as one JSON object ``{"error": category,
"message": ...}``. Exit status: 0 success, 2 configuration, 3 data,
4 numerical, 5 non-convergence (results are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, InvalidArgumentError, NumericalError, RRMEError
from .evaluation import TABLE_COLUMNS, evaluate_fit
from .model import Lambdas, PairedDataset, batched_posteriors, fit
from .selection import NelderMeadOptions, SearchOptions, cv_score, make_folds, select_penalties, select_pc_numbers
from .simulation import GroundTruth, simulate
from .splinebasis import design_matrix, make_basis

log = logging.getLogger("rrme")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_NOT_CONVERGED = 0, 2, 3, 4, 5

__all__ = ["main", "build_parser", "exit_code_for"]


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidArgumentError)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return 1


# --- helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (
        ("family", "model.family"),
        ("k_alpha", "model.k_alpha"),
        ("k_beta", "model.k_beta"),
        ("gamma", "model.gamma"),
        ("folds", "cv.folds"),
        ("cv_seed", "cv.seed"),
        ("r", "cv.r"),
        ("grid", "cv.grid"),
        ("max_iter", "fit.max_iter"),
        ("rel_tol", "fit.rel_tol"),
        ("knots", "basis.knots"),
        ("threads", "threads"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    lam = getattr(args, "lam", None)
    if lam is not None:
        for name in ("mu", "nu", "f", "g"):
            overrides[f"penalty.lambda_{name}"] = lam
    if getattr(args, "domain", None) is not None:
        overrides["basis.domain"] = list(args.domain)
    return load_config(args.config, overrides)


def _dataset(path, cfg: RunConfig) -> PairedDataset:
    return io.read_dataset(path, cfg.basis.domain)


def _basis(cfg: RunConfig, dataset: PairedDataset):
    domain = tuple(cfg.basis.domain) if cfg.basis.domain is not None else dataset.domain
    return make_basis(domain, cfg.basis.interior_knots(domain), cfg.basis.degree)


def _search_options(cfg: RunConfig, lambdas_fixed=None) -> SearchOptions:
    return SearchOptions(
        start=cfg.cv.start,
        nelder_mead=NelderMeadOptions(max_evals=cfg.cv.max_evals),
        fit=cfg.fit_options(lambdas_fixed or Lambdas()),
    )


def _write_scores(path, dataset: PairedDataset, params, basis) -> None:
    post = batched_posteriors(params, basis, dataset)
    ka, kb = params.k_alpha, params.k_beta
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + [f"alpha{j + 1}" for j in range(ka)] + [f"beta{j + 1}" for j in range(kb)] + ["u_hat"])
        for i, s in enumerate(dataset.subjects):
            w.writerow([s.id] + [repr(float(v)) for v in post.score_mean[i]] + [repr(float(post.u_hat[i]))])


# --- commands -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    ds, truth = simulate(args.scenario, args.gamma, args.sigma2, args.n, args.seed)
    io.write_dataset(ds, args.out)
    truth_path = args.truth or str(Path(args.out).with_suffix("")) + ".truth.json"
    io.write_json(truth.to_json(), truth_path)
    print(json.dumps({"dataset": str(args.out), "truth": truth_path, "n": ds.n}))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data, cfg)
    basis = _basis(cfg, ds)
    m = cfg.model
    extra = {}
    if cfg.penalty.search:
        lam, rep = select_penalties(ds, basis, m.k_alpha, m.k_beta, m.family, cfg.cv.folds, cfg.cv.seed, _search_options(cfg))
        extra["cv"] = rep.to_json()
    else:
        lam = cfg.penalty.lambdas()
    res = fit(ds, basis, m.k_alpha, m.k_beta, m.family, cfg.fit_options(lam))
    io.save_parameters(args.out, res.params, basis, res, extra)
    if args.scores:
        _write_scores(args.scores, ds, res.params, basis)
    print(json.dumps({"parameters": str(args.out), "converged": res.converged, "iterations": res.iterations, "objective": res.objective}))
    if not res.converged:
        print(json.dumps({"error": "non-convergence", "message": f"no convergence in {res.iterations} iterations"}), file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _grid(args, domain) -> np.ndarray:
    if args.times:
        try:
            return np.array([float(v) for v in args.times.split(",")])
        except ValueError:
            raise ConfigError("--times must be a comma-separated list of numbers") from None
    if args.grid_size < 2:
        raise ConfigError("--grid-size must be at least 2")
    return np.linspace(domain[0], domain[1], args.grid_size)


def cmd_predict(args) -> int:
    params, basis, _ = io.load_parameters(args.params)
    t = _grid(args, basis.domain)
    B = design_matrix(basis, t)
    ka = params.k_alpha
    if args.data:
        ds = io.read_dataset(args.data, basis.domain)
        post = batched_posteriors(params, basis, ds)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "channel", "time", "fitted"])
            for i, s in enumerate(ds.subjects):
                sc = post.score_mean[i]
                for ch, vals in (
                    ("Y", B @ (params.theta_mu + params.Theta_f @ sc[:ka])),
                    ("Z", B @ (params.theta_nu + params.Theta_g @ sc[ka:])),
                ):
                    for tt, v in zip(t, vals):
                        w.writerow([s.id, ch, repr(float(tt)), repr(float(v))])
    if args.effects:
        # mean +- 2 x score standard deviation x PC function
        with open(args.effects, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "component", "time", "mean", "plus", "minus"])
            for ch, theta, Theta, D in (
                ("Y", params.theta_mu, params.Theta_f, params.D_alpha),
                ("Z", params.theta_nu, params.Theta_g, params.D_beta),
            ):
                mean = B @ theta
                for j in range(Theta.shape[1]):
                    eff = 2.0 * math.sqrt(max(D[j], 0.0)) * (B @ Theta[:, j])
                    for tt, m0, e in zip(t, mean, eff):
                        w.writerow([ch, j + 1, repr(float(tt)), repr(float(m0)), repr(float(m0 + e)), repr(float(m0 - e))])
    if not args.data and not args.effects:
        raise ConfigError("predict needs --data and/or --effects")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data, cfg)
    basis = _basis(cfg, ds)
    fixed = None if cfg.penalty.search or args.search else cfg.penalty.lambdas()
    sel = select_pc_numbers(
        ds,
        basis,
        cfg.model.family,
        [tuple(g) for g in cfg.cv.grid],
        cfg.cv.r,
        cfg.cv.folds,
        cfg.cv.seed,
        _search_options(cfg),
        fixed_lambdas=fixed,
        workers=cfg.threads,
    )
    report = sel.to_json()
    report["family"] = cfg.model.family
    report["folds"] = cfg.cv.folds
    io.write_json(report, args.out)
    print(json.dumps(report["selected"]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, basis, _ = io.load_parameters(args.params)
    ds = io.read_dataset(args.data, basis.domain)
    truth = GroundTruth.from_json(io.read_json(args.truth))
    rep = evaluate_fit(params, truth, ds, basis, allow_mismatch=args.allow_mismatch)
    out = rep.to_json()
    out["columns"] = [c for c in TABLE_COLUMNS if c in rep.values] + [c for c in rep.values if c not in TABLE_COLUMNS]
    io.write_json(out, args.out)
    print(json.dumps({k: round(v, 3) for k, v in rep.scaled.items()}))
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data, cfg)
    basis = _basis(cfg, ds)
    m = cfg.model
    lam = cfg.penalty.lambdas()
    folds = make_folds(ds, cfg.cv.folds, cfg.cv.seed)
    opts = cfg.fit_options(lam)
    warm = fit(ds, basis, m.k_alpha, m.k_beta, m.family, opts).params
    rep = cv_score(ds, basis, m.k_alpha, m.k_beta, m.family, lam, folds, opts, warm)
    io.write_json(rep.to_json(), args.out)
    print(json.dumps({"mae_y": rep.mae_y, "mae_z": rep.mae_z, "mae_combined": rep.mae_combined}))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--threads", type=int)
    if model:
        p.add_argument("--data", required=True, help="dataset CSV (subject_id,channel,time,value)")
        p.add_argument("--family", help="normal, t or slash")
        p.add_argument("--k-alpha", dest="k_alpha", type=int)
        p.add_argument("--k-beta", dest="k_beta", type=int)
        p.add_argument("--gamma", type=float, help="fix the degrees of freedom")
        p.add_argument("--lambda", dest="lam", help="one value for all four penalties, or 'search'")
        p.add_argument("--knots", type=int, help="number of equally spaced interior knots")
        p.add_argument("--domain", type=float, nargs=2)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--rel-tol", dest="rel_tol", type=float)
        p.add_argument("--folds", type=int)
        p.add_argument("--cv-seed", dest="cv_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrme", description="Robust reduced-rank FPCA for paired sparse curves")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset and its ground truth")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma2", type=float, default=0.04)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write a parameter file")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scores")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="fitted curves and PC effect curves on a grid")
    _common(p, model=False)
    p.add_argument("--params", required=True)
    p.add_argument("--data")
    p.add_argument("--grid-size", dest="grid_size", type=int, default=101)
    p.add_argument("--times")
    p.add_argument("--out", default="curves.csv")
    p.add_argument("--effects")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select", help="choose PC numbers (and penalties) by cross-validation")
    _common(p)
    p.add_argument("--grid", help="e.g. 3x3")
    p.add_argument("--r", type=float)
    p.add_argument("--search", action="store_true", help="search penalties in every grid cell")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="IAE report against a ground-truth sidecar")
    _common(p, model=False)
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--allow-mismatch", dest="allow_mismatch", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="cross-validation score at given penalties")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RRMEError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
