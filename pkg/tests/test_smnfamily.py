import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from oracles import quad_moments

from rrme.errors import DegenerateUpdateError, InvalidArgumentError, NotApplicableError
from rrme.smnfamily import (
    MixingFamily,
    canonical_kind,
    conditional_u_moments,
    digamma,
    gamma_objective,
    gamma_update,
    log_gamma,
    log_marginal_kernel,
    lower_incomplete_gamma_regularized,
    mixing_log_density,
    u_moments,
)


def test_kind_aliases():
    assert canonical_kind("t") == "student_t"
    assert MixingFamily("slash").gamma == 2.0
    assert MixingFamily("normal", 5).gamma is None
    with pytest.raises(InvalidArgumentError):
        canonical_kind("cauchy")
    with pytest.raises(InvalidArgumentError):
        MixingFamily("t", -1)


def test_mixing_log_density_examples():
    assert mixing_log_density(MixingFamily("slash", 1), 0.5) == pytest.approx(0.0, abs=1e-15)
    assert mixing_log_density(MixingFamily("student_t", 2), 1.0) == pytest.approx(-1.0, abs=1e-15)
    assert mixing_log_density(MixingFamily("slash", 2), 0.5) == pytest.approx(0.0, abs=1e-15)
    assert mixing_log_density(MixingFamily("slash", 2), 1.5) == -math.inf
    assert mixing_log_density(MixingFamily("student_t", 2), -1.0) == -math.inf
    with pytest.raises(NotApplicableError):
        mixing_log_density(MixingFamily("normal"), 1.0)


@pytest.mark.parametrize("kind,gamma", [("student_t", 3.0), ("slash", 1.5)])
def test_mixing_density_integrates_to_one(kind, gamma):
    fam = MixingFamily(kind, gamma)
    hi = 1.0 if kind == "slash" else math.inf
    total = integrate.quad(lambda u: math.exp(mixing_log_density(fam, u)), 0, hi)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


def test_normal_moments():
    m = conditional_u_moments(MixingFamily("normal"), 3.7, 5)
    assert (m.u_hat, m.log_u_hat) == (1.0, 0.0)


def test_student_t_example():
    m = conditional_u_moments(MixingFamily("student_t", 2), 2.0, 4)
    assert m.u_hat == pytest.approx(1.5, abs=1e-14)
    assert m.log_u_hat == pytest.approx(special.digamma(3) - math.log(2), abs=1e-14)
    assert m.log_u_hat == pytest.approx(0.22963, abs=1e-5)
    q = quad_moments("student_t", 2.0, 2.0, 4)
    assert m.u_hat == pytest.approx(q[0], abs=1e-8)
    assert m.log_u_hat == pytest.approx(q[1], abs=1e-8)


def test_slash_example_delta_zero():
    m = conditional_u_moments(MixingFamily("slash", 1), 0.0, 2)
    assert m.u_hat == pytest.approx(2 / 3, abs=1e-14)
    assert m.log_u_hat == pytest.approx(-0.5, abs=1e-14)
    q = quad_moments("slash", 1.0, 0.0, 2)
    assert m.u_hat == pytest.approx(q[0], abs=1e-10)
    assert m.log_u_hat == pytest.approx(q[1], abs=1e-10)


def test_slash_incomplete_gamma_formula():
    # E[U] = (2/delta) P(a+1, delta/2) Gamma(a+1) / (P(a, delta/2) Gamma(a))
    g, d, delta = 1.3, 7, 9.0
    a = g + d / 2
    ref = (2 / delta) * a * special.gammainc(a + 1, delta / 2) / special.gammainc(a, delta / 2)
    assert conditional_u_moments(MixingFamily("slash", g), delta, d).u_hat == pytest.approx(ref, rel=1e-12)


def test_moment_errors():
    with pytest.raises(InvalidArgumentError):
        conditional_u_moments(MixingFamily("student_t", 2), -1.0, 3)
    with pytest.raises(InvalidArgumentError):
        conditional_u_moments(MixingFamily("student_t", 2), 1.0, 0)


def test_large_delta_slash_is_stable():
    u, lu = u_moments("slash", 2.0, np.array([1e4, 1e6]), np.array([10, 10]))
    for k in range(2):
        q = quad_moments("slash", 2.0, [1e4, 1e6][k], 10)
        assert u[k] == pytest.approx(q[0], rel=1e-8)
        assert lu[k] == pytest.approx(q[1], rel=1e-8)


def test_normal_limit_of_t():
    for d in range(1, 51, 7):
        for delta in np.linspace(0, d, 5):
            m = conditional_u_moments(MixingFamily("student_t", 1e6), delta, d)
            assert abs(m.u_hat - 1) < 1e-3 and abs(m.log_u_hat) < 1e-3


def test_log_marginal_kernel_against_quadrature():
    for kind, g in (("student_t", 3.0), ("slash", 0.8)):
        for delta, d in ((0.0, 1), (2.5, 4), (40.0, 12)):
            fam = MixingFamily(kind, g)
            hi = 1.0 if kind == "slash" else math.inf
            ref = integrate.quad(
                lambda u: math.exp(mixing_log_density(fam, u) + 0.5 * d * math.log(u) - 0.5 * u * delta),
                0,
                hi,
                epsabs=0,
                epsrel=1e-12,
                limit=200,
            )[0]
            assert float(log_marginal_kernel(kind, g, delta, d)) == pytest.approx(math.log(ref), abs=1e-9)


def test_special_functions():
    assert log_gamma(1.0) == 0.0
    assert digamma(1.0) == pytest.approx(-0.5772156649, abs=1e-9)
    x = np.array([0.1, 1.0, 7.0])
    assert np.allclose(lower_incomplete_gamma_regularized(1.0, x), 1 - np.exp(-x), rtol=1e-14)
    for f in (log_gamma, digamma):
        with pytest.raises(InvalidArgumentError):
            f(0.0)
    with pytest.raises(InvalidArgumentError):
        lower_incomplete_gamma_regularized(0.0, 1.0)


def test_digamma_against_series():
    # psi(x) = -gamma_E + sum_k (1/(k+1) - 1/(k+x)), with a tail correction
    x = 3.7
    k = np.arange(2_000_000, dtype=float)
    s = -np.euler_gamma + np.sum(1.0 / (k + 1) - 1.0 / (k + x)) + (x - 1) / k.size
    assert float(digamma(x)) == pytest.approx(s, abs=1e-9)


def test_gamma_update_examples():
    assert gamma_update("slash", [0.6, 0.6], [-0.5, -0.5]) == pytest.approx(2.0)
    assert gamma_update("slash", [1.0], [-1e-9], bounds=(0.1, 100)) == 100.0
    g = gamma_update("student_t", np.ones(20), np.zeros(20))
    assert g == 1000.0
    grid = np.linspace(0.1, 1000, 400)
    vals = [gamma_objective("student_t", x, np.ones(20), np.zeros(20)) for x in grid]
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(DegenerateUpdateError):
        gamma_update("slash", [1.0], [0.0])
    with pytest.raises(NotApplicableError):
        gamma_update("normal", [1.0], [0.0])
    with pytest.raises(InvalidArgumentError):
        gamma_update("student_t", [], [])


def test_gamma_update_recovers_t_dof():
    rng = np.random.default_rng(3)
    g_true = 4.0
    u = rng.gamma(g_true / 2, 2 / g_true, 20000)
    g = gamma_update("student_t", u, np.log(u))
    assert g == pytest.approx(g_true, rel=0.1)
    grid = np.linspace(0.5 * g, 1.5 * g, 41)
    assert all(gamma_objective("student_t", g, u, np.log(u)) <= gamma_objective("student_t", x, u, np.log(u)) + 1e-9 for x in grid)


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(["student_t", "slash"]),
    st.floats(0.2, 30.0),
    st.floats(0.0, 200.0),
    st.integers(1, 40),
)
def test_jensen_and_monotone(kind, g, delta, d):
    u, lu = u_moments(kind, g, np.array([delta, delta + 1.0]), np.array([d, d]))
    assert lu[0] <= math.log(u[0]) + 1e-12
    assert u[1] <= u[0] + 1e-12
    assert u[0] > 0
    if kind == "slash":
        assert u[0] <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["student_t", "slash"]), st.floats(0.3, 20.0), st.floats(0.0, 150.0), st.integers(1, 40))
def test_moments_match_quadrature_property(kind, g, delta, d):
    u, lu = u_moments(kind, g, delta, d)
    q = quad_moments(kind, g, delta, d)
    assert float(u) == pytest.approx(q[0], abs=1e-8, rel=1e-8)
    assert float(lu) == pytest.approx(q[1], abs=1e-8, rel=1e-8)
