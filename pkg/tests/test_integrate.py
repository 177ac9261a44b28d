import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smsubu.integrate import (
    NO_NOISE, PhaseState, a_drift, b_kick, baoab_step, euler_step, leapfrog_kick_drift, o_refresh, ou_coeffs,
    ou_step, reflect_hypercube, ubu_step,
)
from smsubu.diagnose import ou_covariance


def one_d(x, v):
    return PhaseState.of([x], [v])


@pytest.mark.parametrize("gamma,t", [(1.0, 0.1), (math.sqrt(8), 0.05), (5.0, 0.5), (1e-3, 1e-4), (2.0, 3e-3)])
def test_noise_coefficients_reproduce_ou_covariance(gamma, t):
    co = ou_coeffs(t, gamma)
    got = np.array([[co.sx1**2 + co.sx2**2, co.sx1 * co.sv1 + co.sx2 * co.sv2],
                    [co.sx1 * co.sv1 + co.sx2 * co.sv2, co.sv1**2 + co.sv2**2]])
    np.testing.assert_allclose(got, _ou_covariance_mp(t, gamma), rtol=1e-9, atol=1e-300)
    if gamma * t > 1e-2:
        np.testing.assert_allclose(ou_covariance(t, gamma), _ou_covariance_mp(t, gamma), rtol=1e-9)


def _ou_covariance_mp(t, gamma):
    # the closed-form integrals in 200-bit arithmetic; double precision cancels for small gamma t
    mpmath.mp.prec = 200
    t, g = mpmath.mpf(t), mpmath.mpf(gamma)
    eta = mpmath.exp(-g * t)
    F = (1 - eta) / g
    vxx = 2 / g * (t - 2 * F + (1 - eta**2) / (2 * g))
    vxv = (1 - eta) ** 2 / g
    return np.array([[float(vxx), float(vxv)], [float(vxv), float(1 - eta**2)]])


def test_mixing_coefficient_matches_extended_precision_at_tiny_gt():
    mpmath.mp.prec = 200
    gamma, t = 1.0, mpmath.mpf("1e-10")
    eta = mpmath.exp(-gamma * t)
    c_ref = mpmath.sqrt((1 - eta) / (1 + eta) * 2 / (gamma * t))
    co = ou_coeffs(1e-10, 1.0)
    assert abs(co.c - float(c_ref)) <= 1e-8 * float(c_ref)
    s_ref = mpmath.sqrt(1 - c_ref**2)
    assert abs(co.s - float(s_ref)) <= 1e-8 * float(s_ref)


@pytest.mark.parametrize("gt", np.logspace(-14, 1, 31))
def test_coefficients_finite_across_scales(gt):
    co = ou_coeffs(gt, 1.0)
    vals = co.as_array()
    assert np.all(np.isfinite(vals))
    assert 0 < co.eta < 1 and 0 < co.c <= 1 and 0 < co.F < gt


def test_series_branch_is_continuous():
    lo = ou_coeffs(2 * 0.00999999, 1.0)
    hi = ou_coeffs(2 * 0.01000001, 1.0)
    np.testing.assert_allclose(lo.as_array(), hi.as_array(), rtol=1e-5)
    np.testing.assert_allclose([lo.c, lo.s], [hi.c, hi.s], rtol=1e-5)


def test_ou_step_deterministic_part():
    s = ou_step(one_d(0.0, 1.0), 0.5, 2.0, NO_NOISE)
    assert s.x[0] == pytest.approx((1 - math.exp(-1)) / 2, rel=1e-14)
    assert s.v[0] == pytest.approx(math.exp(-1), rel=1e-14)
    s = ou_step(one_d(0.7, 0.0), 0.5, 2.0, NO_NOISE)
    assert s.x[0] == 0.7 and s.v[0] == 0.0


def test_ou_step_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        ou_step(one_d(0, 0), 0.0, 1.0, NO_NOISE)


def test_ou_monte_carlo_cross_covariance():
    rng = np.random.default_rng(11)
    n = 10**6
    s = ou_step(PhaseState(np.zeros(n), np.zeros(n)), 0.25, 1.0, rng)
    c = np.mean(s.x * s.v) - s.x.mean() * s.v.mean()
    se = np.std(s.x * s.v) / math.sqrt(n)
    assert abs(c - (1 - math.exp(-0.25)) ** 2) < 4 * se


def test_b_kick_and_a_drift():
    s = b_kick(one_d(0.0, 0.0), 0.1, np.array([1.0]))
    assert s.v[0] == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        b_kick(one_d(0.0, 0.0), 0.1, np.array([1.0, 2.0]))
    two = b_kick(b_kick(one_d(0, 0), 0.1, np.array([1.0])), 0.1, np.array([2.0]))
    assert two.v[0] == pytest.approx(b_kick(one_d(0, 0), 0.1, np.array([3.0])).v[0])
    d = a_drift(PhaseState.of([0, 0], [1, 2]), 0.5)
    np.testing.assert_allclose(d.x, [0.5, 1.0])
    np.testing.assert_allclose(a_drift(a_drift(d, 0.2), 0.3).x, a_drift(d, 0.5).x)


def test_o_refresh_limits():
    assert o_refresh(np.array([3.0]), math.log(2), 1.0, NO_NOISE)[0] == pytest.approx(1.5)
    rng = np.random.default_rng(2)
    v = o_refresh(np.full(10**5, 7.0), 50.0, 1.0, rng)
    assert abs(v.var() - 1.0) < 4 * math.sqrt(2 / 10**5)
    v = o_refresh(rng.standard_normal(10**5), 0.3, 2.0, rng)
    assert abs(v.var() - 1.0) < 4 * math.sqrt(2 / 10**5)


def test_ubu_free_particle_composes_ou_half_steps():
    h, g = 0.3, 1.7
    s = ubu_step(one_d(0.2, 1.0), h, g, lambda x: np.zeros_like(x), NO_NOISE)
    F = -math.expm1(-g * h) / g
    assert s.x[0] == pytest.approx(0.2 + F, rel=1e-14)
    assert s.v[0] == pytest.approx(math.exp(-g * h), rel=1e-14)


def _counting(fn):
    calls = []

    def wrapped(x):
        calls.append(1)
        return fn(x)
    return wrapped, calls


def test_one_gradient_per_step():
    rng = np.random.default_rng(0)
    grad, calls = _counting(lambda x: x)
    s = one_d(1.0, 0.0)
    for _ in range(5):
        s = ubu_step(s, 0.1, 1.0, grad, rng)
    assert len(calls) == 5
    grad, calls = _counting(lambda x: x)
    g = s.x.copy()
    for _ in range(5):
        s, g = baoab_step(s, 0.1, 1.0, g, grad, rng)
    assert len(calls) == 5
    grad, calls = _counting(lambda x: x)
    for _ in range(5):
        s = euler_step(s, 0.1, 1.0, grad, rng)
    assert len(calls) == 5


def test_baoab_zero_potential_is_drift_refresh_drift():
    zero = lambda x: np.zeros_like(x)
    s, g = baoab_step(one_d(0.0, 1.0), 0.2, 1.0, np.zeros(1), zero, NO_NOISE)
    v1 = math.exp(-0.2)
    assert s.v[0] == pytest.approx(v1)
    assert s.x[0] == pytest.approx(0.1 + 0.1 * v1)


def test_euler_step_direct_evaluation():
    s = euler_step(one_d(0.0, 1.0), 0.1, 1.0, lambda x: np.zeros_like(x), NO_NOISE)
    assert s.x[0] == pytest.approx(0.1) and s.v[0] == pytest.approx(0.9)


def test_euler_mean_matches_ou_to_second_order():
    h, g = 1e-3, 1.3
    e = euler_step(one_d(0.4, 0.8), h, g, lambda x: np.zeros_like(x), NO_NOISE)
    o = ou_step(one_d(0.4, 0.8), h, g, NO_NOISE)
    assert abs(e.x[0] - o.x[0]) < 1e-5 and abs(e.v[0] - o.v[0]) < 1e-5


def test_leapfrog_free_flight_reversibility_and_jacobian():
    s = leapfrog_kick_drift(PhaseState.of([1, 2], [0.5, -1]), 0.1, lambda x: np.zeros_like(x))
    np.testing.assert_allclose(s.x, [1.05, 1.9])
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    grad = lambda x: A @ x
    z0 = PhaseState.of([0.3, -0.7], [1.1, 0.4])
    z1 = leapfrog_kick_drift(z0, 0.37, grad)
    back = leapfrog_kick_drift(PhaseState(z1.x, -z1.v), 0.37, grad)
    np.testing.assert_allclose(back.x, z0.x, atol=1e-12)
    np.testing.assert_allclose(-back.v, z0.v, atol=1e-12)
    eps = 1e-2  # the map is linear here, so central differences carry rounding error only
    J = np.empty((4, 4))
    base = np.concatenate([z0.x, z0.v])
    for j in range(4):
        e = np.zeros(4)
        e[j] = eps
        p = leapfrog_kick_drift(PhaseState((base + e)[:2], (base + e)[2:]), 0.37, grad)
        m = leapfrog_kick_drift(PhaseState((base - e)[:2], (base - e)[2:]), 0.37, grad)
        J[:, j] = (np.concatenate([p.x, p.v]) - np.concatenate([m.x, m.v])) / (2 * eps)
    assert abs(np.linalg.det(J) - 1.0) < 1e-10


def test_reflection_examples():
    s = reflect_hypercube(one_d(0.4, 2.0), 0.0, 1.0)
    assert (s.x[0], s.v[0]) == (0.4, 2.0)
    s = reflect_hypercube(one_d(1.3, 2.0), 0.0, 1.0)
    assert s.x[0] == pytest.approx(0.7) and s.v[0] == -2.0
    # 3.5 folds across +1 to -1.5, then across -1 to -0.5; two sign flips leave v unchanged
    s = reflect_hypercube(one_d(3.5, 2.0), 0.0, 1.0)
    assert s.x[0] == pytest.approx(-0.5) and s.v[0] == 2.0
    with pytest.raises(ValueError):
        reflect_hypercube(one_d(0, 0), 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=5), st.floats(0.01, 3.0), st.floats(-2, 2))
def test_reflection_lands_in_box(xs, rho_max, center):
    x = np.array(xs)
    s = reflect_hypercube(PhaseState(x, np.ones_like(x)), center, rho_max)
    assert np.all(np.abs(s.x - center) <= rho_max + 1e-12)
    inside = (x >= center - rho_max) & (x <= center + rho_max)
    np.testing.assert_array_equal(s.x[inside], x[inside])
    assert np.all(np.abs(s.v) == 1.0)
