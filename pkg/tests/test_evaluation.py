import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrme.errors import InvalidArgumentError
from rrme.evaluation import TABLE_COLUMNS, align_components, evaluate_fit, iae, midpoints
from rrme.model import FitOptions, ParameterSet, fit
from rrme.simulation import f1, f2, g1, g2, mu, nu, simulate
from rrme.smnfamily import MixingFamily
from rrme.splinebasis import equispaced_knots, make_basis, project_function


def test_iae_examples():
    h = lambda t: np.sin(3 * t)
    assert iae(h, h) == 0.0
    assert iae(lambda t: h(t) + 0.7, h) == pytest.approx(0.7, abs=1e-14)
    assert abs(iae(lambda t: t, lambda t: 0 * t) - 0.5) <= 2.5e-5
    assert iae(lambda t: t, 0.0 * midpoints()) == pytest.approx(0.5)
    assert iae(lambda t: 1.0, lambda t: 0.0, (2.0, 5.0)) == pytest.approx(3.0)
    with pytest.raises(InvalidArgumentError):
        iae(np.zeros(5), lambda t: t)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_iae_metric_properties(a, b, c):
    f = lambda t: a * t**2
    g = lambda t: b * np.cos(t)
    k = lambda t: c * t
    assert iae(f, g) >= 0
    assert iae(f, g) == iae(g, f)
    assert iae(f, k) <= iae(f, g) + iae(g, k) + 1e-12


def test_align_components():
    assert align_components([lambda t: -g1(t)], [g1]).tolist() == [-1.0]
    assert align_components([g1, g2], [g1, g2]).tolist() == [1.0, 1.0]
    rng = np.random.default_rng(0)
    noisy = f1(midpoints()) + 0.01 * rng.normal(size=100)
    s = align_components([noisy], [f1])
    assert s[0] == 1.0
    assert iae(s[0] * noisy, f1) == iae(noisy, f1)
    with pytest.raises(InvalidArgumentError):
        align_components([f1], [f1, f2])


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-1, 1))
def test_alignment_never_increases_iae(a, b):
    est = lambda t: a * g1(t) + b
    s = align_components([est], [g1])[0]
    assert iae(lambda t: s * est(t), g1) <= iae(est, g1) + 1e-12


@pytest.fixture(scope="module")
def basis():
    return make_basis((0.0, 1.0), equispaced_knots((0.0, 1.0), 20))


def test_oracle_injection(basis):
    ds, truth = simulate(1, None, 0.04, 30, 0)
    Tf = np.column_stack([project_function(basis, f) for f in (f1, f2)])
    Tg = np.column_stack([project_function(basis, g) for g in (g1, g2)])
    S = truth.sigma_ab
    p = ParameterSet(project_function(basis, mu), project_function(basis, nu), Tf, Tg, np.diag(S)[:2], np.diag(S)[2:], S[:2, 2:], 0.04, 0.04, MixingFamily("normal"))
    rep = evaluate_fit(p, truth, ds, basis)
    # spline projections of the smooth truth carry only a small approximation error
    for k in ("mu", "nu", "f1", "f2", "g1", "g2"):
        assert rep.values[k] < 1e-3, k
    assert rep.values["Y"] > 1e-3 and rep.values["Z"] > 1e-3
    assert rep.scaled["Y"] == 1000 * rep.values["Y"]
    assert list(rep.values) == list(TABLE_COLUMNS)
    assert rep.signs == {"f": [1.0, 1.0], "g": [1.0, 1.0]}


def test_sign_flip_does_not_change_pc_iae(basis):
    ds, truth = simulate(1, None, 0.04, 20, 0)
    res = fit(ds, basis, 2, 2, "normal", FitOptions(lambdas=1e-6, max_iter=30))
    a = evaluate_fit(res, truth, ds, basis)
    flipped = res.params.copy(Theta_f=-res.params.Theta_f, C=-res.params.C)
    b = evaluate_fit(flipped, truth, ds, basis)
    for k in TABLE_COLUMNS:
        assert b.values[k] == pytest.approx(a.values[k], rel=1e-10, abs=1e-13)


def test_component_mismatch(basis):
    ds, truth = simulate(1, None, 0.04, 10, 0)
    res = fit(ds, basis, 3, 1, "normal", FitOptions(lambdas=1e-6, max_iter=5))
    with pytest.raises(InvalidArgumentError):
        evaluate_fit(res, truth, ds, basis)
    rep = evaluate_fit(res, truth, ds, basis, allow_mismatch=True)
    assert rep.component_mismatch
    assert "f3" in rep.values and "g2" in rep.values
    assert rep.to_json()["component_mismatch"] is True
