"""Acceptance gate: nine criteria at their stated sizes and tolerances.

Each criterion is a function returning ``(passed, detail)``. Under pytest
every result is collected and printed as one line per criterion in the
terminal summary; ``python tests/test_acceptance.py [numbers...]`` runs them
directly and prints the same lines. The replicate studies (criteria 1 to 3)
take tens of minutes on one core.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import (  # noqa: E402
    posterior_sampling_moments,
    quad_log_marginal,
    quad_moments,
    stationarity_gradients,
    toy_problem,
)

from rrme.evaluation import evaluate_fit  # noqa: E402
from rrme.model import FitOptions, Lambdas, ParameterSet, PairedDataset, SubjectData, e_step, fit, penalized_objective  # noqa: E402
from rrme.selection import SearchOptions, s_r_rule, select_pc_numbers, select_penalties  # noqa: E402
from rrme.simulation import simulate  # noqa: E402
from rrme.smnfamily import MixingFamily, conditional_u_moments  # noqa: E402
from rrme.splinebasis import design_matrix, equispaced_knots, eval_basis, make_basis, project_function  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}

# a replicate seed outside 0..49 tunes the penalties for the replicate studies
TUNING_SEED = 1000
GRID_3X3 = [(a, b) for a in (1, 2, 3) for b in (1, 2, 3)]


def basis_unit():
    return make_basis((0.0, 1.0), equispaced_knots((0.0, 1.0), 10))


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# --- 1 and 2: replicate studies -------------------------------------------------------


def _replicate_study(scenario, gamma, sigma2, n, replicates, families, max_iter=5000):
    """Select penalties once per family on a tuning replicate, then fit every replicate."""
    basis = basis_unit()
    tune, _ = simulate(scenario, gamma, sigma2, n, TUNING_SEED)
    lams = {}
    for fam in families:
        so = SearchOptions(fit=FitOptions(max_iter=500))
        lams[fam], _ = select_penalties(tune, basis, 2, 2, fam, K=10, seed=0, search_options=so)
    reports = {fam: [] for fam in families}
    unconverged = {fam: 0 for fam in families}
    for rep in range(replicates):
        ds, truth = simulate(scenario, gamma, sigma2, n, rep)
        for fam in families:
            res = fit(ds, basis, 2, 2, fam, FitOptions(lambdas=lams[fam], max_iter=max_iter))
            unconverged[fam] += not res.converged
            reports[fam].append(evaluate_fit(res, truth, ds, basis).values)
    means = {fam: {k: float(np.mean([r[k] for r in reports[fam]])) for k in reports[fam][0]} for fam in families}
    return means, lams, unconverged


def criterion_1():
    means, lams, unconv = _replicate_study(2, 2.0, 0.04, 100, 50, ("student_t", "normal"))
    t, nrm = means["student_t"], means["normal"]
    pc = lambda m: float(np.mean([m[k] for k in ("f1", "f2", "g1", "g2")]))
    gain = {ch: 1.0 - t[ch] / nrm[ch] for ch in ("Y", "Z")}
    ok = pc(t) <= 0.10 and pc(nrm) >= 0.13 and min(gain.values()) >= 0.08
    detail = (
        f"PC IAE t={_fmt(pc(t))} (<=0.10) normal={_fmt(pc(nrm))} (>=0.13); "
        f"curve IAE reduction Y={gain['Y']:.1%} Z={gain['Z']:.1%} (>=8%); "
        f"unconverged fits t={unconv['student_t']} normal={unconv['normal']}"
    )
    return ok, detail


def criterion_2():
    means, _, unconv = _replicate_study(1, None, 0.04, 100, 50, ("student_t", "normal"))
    t, nrm = means["student_t"], means["normal"]
    rel = {k: abs(t[k] - nrm[k]) / nrm[k] for k in t}
    worst = max(rel, key=rel.get)
    ok = all(v <= 0.10 for v in rel.values())
    cols = " ".join(f"{k}={1000 * t[k]:.1f}/{1000 * nrm[k]:.1f}" for k in t)
    return ok, f"max relative gap {rel[worst]:.2%} on {worst} (<=10%); x1000 t/normal: {cols}"


# --- 3: PC-count selection ------------------------------------------------------------


def criterion_3():
    basis = basis_unit()
    tune, _ = simulate(2, 5.0, 0.04, 100, TUNING_SEED)
    so = SearchOptions(fit=FitOptions(max_iter=500))
    # one set of penalties, chosen at the true (2, 2) on the tuning replicate,
    # scores every cell so the comparison is between PC counts alone
    lams, _ = select_penalties(tune, basis, 2, 2, "student_t", K=10, seed=0, search_options=so)
    hits = {0.05: 0, 0.0: 0}
    picks = {0.05: [], 0.0: []}
    for rep in range(20):
        ds, _ = simulate(2, 5.0, 0.04, 100, rep)
        sel = select_pc_numbers(ds, basis, "student_t", GRID_3X3, 0.05, K=10, seed=rep, search_options=so, fixed_lambdas=lams)
        for r in hits:
            pick = s_r_rule(sel.table, r)
            picks[r].append(pick)
            hits[r] += pick == (2, 2)
    rate = {r: hits[r] / 20 for r in hits}
    ok = rate[0.05] >= 0.90 and rate[0.0] <= 0.70
    others = {r: sorted({p for p in picks[r] if p != (2, 2)}) for r in picks}
    return ok, (
        f"correct (2,2) rate r=0.05: {rate[0.05]:.0%} (>=90%), r=0: {rate[0.0]:.0%} (<=70%); "
        f"other picks r=0.05 {others[0.05]}, r=0 {others[0.0]}"
    )


# --- 4: EM monotonicity -----------------------------------------------------------------


def criterion_4():
    basis = basis_unit()
    families = (MixingFamily("normal"), MixingFamily("student_t"), MixingFamily("slash"))
    settings = ((1, None), (2, 3.0), (3, 1.5))
    violations = 0
    worst = 0.0
    steps = 0
    for seed in range(20):
        for scenario, gamma in settings:
            ds, _ = simulate(scenario, gamma, 0.04, 60, seed)
            for fam in families:
                res = fit(ds, basis, 2, 2, fam, FitOptions(lambdas=1e-5, max_iter=300))
                tr = np.asarray(res.objective_trace)
                rise = (tr[1:] - tr[:-1]) / np.abs(tr[:-1])
                steps += rise.size
                worst = max(worst, float(rise.max(initial=-np.inf)))
                violations += int(np.sum(rise > 1e-8))
    return violations == 0, f"{violations} violations over {steps} EM steps (180 fits); largest relative rise {worst:.2e} (slack 1e-8)"


# --- 5: posterior moments -----------------------------------------------------------------


def criterion_5():
    grid = [(delta, d, g) for delta in (0.0, 0.5, 3.0, 20.0, 150.0) for d in (1, 4, 12, 30) for g in (0.5, 2.0, 5.0, 20.0, 100.0)]
    worst = 0.0
    for kind in ("student_t", "slash"):
        for delta, d, g in grid:
            m = conditional_u_moments(MixingFamily(kind, g), delta, d)
            q = quad_moments(kind, g, delta, d)
            worst = max(worst, abs(m.u_hat - q[0]), abs(m.log_u_hat - q[1]))
    quad_ok = worst <= 1e-8

    basis = make_basis((0.0, 1.0), (0.5,))
    q = basis.dim
    rng = np.random.default_rng(11)
    params = ParameterSet(
        0.3 * rng.normal(size=q),
        0.3 * rng.normal(size=q),
        np.linalg.qr(rng.normal(size=(q, 1)))[0],
        np.linalg.qr(rng.normal(size=(q, 1)))[0],
        [1.2],
        [0.8],
        [[0.4]],
        0.5,
        0.7,
        MixingFamily("student_t", 3.0),
    )
    subj = SubjectData("a", [0.1, 0.45, 0.9], [0.7, -1.1, 1.6], [0.2, 0.8], [0.9, -0.4])
    ps = e_step(params, basis, PairedDataset([subj], (0.0, 1.0)))[0]
    m1, s1, m2, s2 = posterior_sampling_moments(params, basis, subj, 1_000_000, seed=0)
    z = max(float(np.max(np.abs(ps.w_first - m1) / s1)), float(np.max(np.abs(ps.w_second - m2) / s2)))
    ok = quad_ok and z < 3.0
    return ok, f"max |moment - quadrature| {worst:.2e} over 200 grid points (<=1e-8); e_step vs 1e6-draw MC max {z:.2f} SE (<3)"


# --- 6: marginal likelihood -----------------------------------------------------------------


def criterion_6():
    rel = {}
    for fam in (MixingFamily("normal"), MixingFamily("student_t", 3.0), MixingFamily("slash", 1.5)):
        basis, ds, params = toy_problem(family=fam)
        ref = -2.0 * np.mean([quad_log_marginal(params, basis, s) for s in ds.subjects])
        val = penalized_objective(params, basis, ds, 0.0)
        rel[fam.kind] = abs(val - ref) / abs(ref)
    ok = all(v <= 1e-6 for v in rel.values())
    return ok, "relative error " + ", ".join(f"{k}={v:.1e}" for k, v in rel.items()) + " (<=1e-6)"


# --- 7: M-step stationarity -------------------------------------------------------------------


def criterion_7():
    basis = basis_unit()
    ds, _ = simulate(2, 5.0, 0.04, 20, 0)
    lam = Lambdas(1e-5, 2e-5, 3e-5, 4e-5)
    worst = (0.0, "")
    blocks = 0
    for fam in (MixingFamily("normal"), MixingFamily("student_t", 4.0), MixingFamily("slash", 1.5)):
        for iters in (1, 10):
            res = fit(ds, basis, 2, 2, fam, FitOptions(lambdas=lam, max_iter=iters, rel_tol=1e-300))
            grads = stationarity_gradients(res.params, basis, ds, lam)
            blocks += len(grads)
            for k, v in grads.items():
                if v > worst[0]:
                    worst = (v, f"{fam.kind}:{k}")
    return worst[0] < 1e-4, f"max finite-difference gradient {worst[0]:.1e} at {worst[1]} over {blocks} block updates (<1e-4)"


# --- 8: normal limit -----------------------------------------------------------------------------


def criterion_8():
    basis = basis_unit()
    ds, _ = simulate(1, None, 0.04, 100, 0)
    lam = 1e-5
    a = fit(ds, basis, 2, 2, "normal", FitOptions(lambdas=lam, max_iter=20000, rel_tol=1e-13))
    b = fit(ds, basis, 2, 2, "student_t", FitOptions(lambdas=lam, max_iter=20000, rel_tol=1e-13, gamma=1e6, update_gamma=False))
    pa, pb = a.params, b.params
    diff = max(
        float(np.max(np.abs(pa.theta_mu - pb.theta_mu))),
        float(np.max(np.abs(pa.theta_nu - pb.theta_nu))),
        abs(pa.sigma2_eps - pb.sigma2_eps),
        abs(pa.sigma2_xi - pb.sigma2_xi),
    )
    return diff <= 1e-4 and a.converged and b.converged, f"max-entry difference {diff:.1e} (<=1e-4); iterations {a.iterations}/{b.iterations}"


# --- 9: basis suite ------------------------------------------------------------------------------


def _composite_gram(basis, deriv=0, cells=200):
    nodes, weights = np.polynomial.legendre.leggauss(6)
    lo, hi = basis.domain
    edges = np.union1d(np.linspace(lo, hi, cells + 1), basis.knots.breakpoints())
    a, b = edges[:-1], edges[1:]
    t = ((a + b)[:, None] / 2 + (b - a)[:, None] / 2 * nodes).ravel()
    w = ((b - a)[:, None] / 2 * weights).ravel()
    B = design_matrix(basis, t, deriv)
    return B.T @ (w[:, None] * B)


def criterion_9():
    configs = [
        ((0.0, 1.0), equispaced_knots((0.0, 1.0), 10)),
        ((0.0, 1.0), (0.05, 0.1, 0.4, 0.41, 0.9)),
        ((-10.0, 50.0), tuple(sorted(equispaced_knots((-5.0, 45.0), 13) + (-5.0, 45.0)))),
    ]
    orth = null = pou = ones = gram = 0.0
    gap_ok = True
    for domain, knots in configs:
        b = make_basis(domain, knots)
        orth = max(orth, float(np.max(np.abs(_composite_gram(b) - np.eye(b.dim)))))
        om = b.omega
        for fn in (lambda t: 1.0 + 0 * t, lambda t: 2.0 - 3.0 * t):
            null = max(null, float(np.max(np.abs(om @ project_function(b, fn)))) / float(np.max(np.abs(om))))
        grid = np.linspace(*domain, 97)
        for t in grid:
            pou = max(pou, abs(float(np.sum(b.chol @ eval_basis(b, t))) - 1.0))
        const = project_function(b, lambda t: 1.0 + 0 * t)
        ones = max(ones, float(np.max(np.abs(design_matrix(b, grid) @ const - 1.0))))
        length = domain[1] - domain[0]
        gram = max(gram, abs(float(np.sum(b.gram)) - length) / length)
        ev = np.linalg.eigvalsh(om)
        gap_ok &= bool(ev[1] < 1e-8 * ev[-1] and (b.dim != 14 or ev[2] > 1e-6 * ev[-1]))
    ok = orth < 1e-8 and null < 1e-8 and pou < 1e-12 and ones < 1e-10 and gram < 1e-12 and gap_ok
    return ok, (
        f"orthonormality {orth:.1e} (<1e-8); penalty nullspace {null:.1e} (<1e-8 relative), eigen-gap {'ok' if gap_ok else 'FAILED'}; "
        f"partition of unity {pou:.1e} (<1e-12); constant reproduction {ones:.1e} (<1e-10); Gram total {gram:.1e}"
    )


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 10)}
NAMES = {
    1: "robustness gap under heavy tails",
    2: "no robustness cost without outliers",
    3: "PC-count selection by the S(r) rule",
    4: "EM monotonicity",
    5: "posterior moment oracles",
    6: "marginal likelihood oracle",
    7: "M-step stationarity",
    8: "normal limit of the t model",
    9: "basis suite",
}


def run(i: int) -> tuple[bool, str]:
    t0 = time.time()
    ok, detail = CRITERIA[i]()
    detail = f"{detail} [{time.time() - t0:.0f}s]"
    RESULTS[i] = (ok, detail)
    return ok, detail


def line(i: int) -> str:
    ok, detail = RESULTS[i]
    return f"criterion {i} ({NAMES[i]}): {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.acceptance
@pytest.mark.parametrize("i", list(range(1, 10)))
def test_criterion(i):
    ok, detail = run(i)
    print(line(i))
    assert ok, detail


if __name__ == "__main__":
    which = [int(a) for a in sys.argv[1:]] or list(range(1, 10))
    failed = 0
    for i in which:
        ok, _ = run(i)
        failed += not ok
        print(line(i), flush=True)
    sys.exit(1 if failed else 0)
