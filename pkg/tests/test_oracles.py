from __future__ import annotations

import math

import mpmath as mp
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate as si
from scipy import optimize

from coalflow import oracles as o

mp.mp.dps = 30


def test_normal_cdf_against_mpmath():
    for x in (-8.0, -2.5, -0.3, 0.0, 0.7, 3.0, 9.0):
        assert o.normal_cdf(x) == pytest.approx(float(mp.ncdf(x)), rel=1e-14, abs=1e-300)
        assert o.normal_sf(x) == pytest.approx(float(mp.ncdf(-x)), rel=1e-13, abs=1e-300)


def test_adaptive_simpson():
    assert o.adaptive_simpson(math.sin, 0.0, math.pi) == pytest.approx(2.0, abs=1e-10)
    assert o.adaptive_simpson(math.sin, math.pi, 0.0) == pytest.approx(-2.0, abs=1e-10)
    assert o.adaptive_simpson(math.exp, 1.0, 1.0) == 0.0
    assert o.integrate(math.sqrt, 0.0, 1.0) == pytest.approx(2 / 3, abs=1e-9)
    with pytest.raises(ValueError):
        o.QuadratureConfig(abs_tol=0.0)


@pytest.mark.parametrize("C", [-1.0, 0.0, 0.5, 2.0])
@pytest.mark.parametrize("t", [0.0, 0.01, 1.0, 5.0])
def test_phi_against_mpmath_quadrature(C, t):
    exact = float(mp.quad(lambda s: mp.e ** (-2 * C * s), [0, t]))
    assert o.phi_C(C, t) == pytest.approx(exact, rel=1e-13, abs=1e-15)


def test_phi_pinned_values():
    # dynamics clock and the variant exponent exp(-2 sqrt(2) C s)
    assert o.phi_C(0.5, 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)
    assert o.phi_C(0.5, 1.0, scale=math.sqrt(2)) == pytest.approx(0.53522, abs=5e-5)
    with pytest.raises(ValueError):
        o.phi_C(1.0, -1.0)


def _survival_mp(C, gap, t):
    # sqrt(2/pi) int_0^{u / sqrt(phi)} e^{-v^2/2} dv with u = gap / sqrt(2)
    phi = mp.quad(lambda s: mp.e ** (-2 * C * s), [0, t])
    x = gap / mp.sqrt(2) / mp.sqrt(phi)
    return float(mp.sqrt(2 / mp.pi) * mp.quad(lambda v: mp.e ** (-v * v / 2), [0, x]))


@pytest.mark.parametrize("C", [-1.0, 0.5])
@pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
def test_survival_against_mpmath(C, t):
    assert o.meeting_survival_linear(C, 0.0, 0.5, t) == pytest.approx(_survival_mp(C, 0.5, t),
                                                                       abs=1e-13)


def test_survival_pinned_value():
    assert o.meeting_survival_linear(0.5, 0.0, 0.5, 1.0) == pytest.approx(0.343454, abs=1e-6)
    # the variant exponent reproduces the other commonly quoted number
    assert o.meeting_survival_linear(0.5, 0.0, 0.5, 1.0, scale=math.sqrt(2)) == pytest.approx(
        0.372, abs=1.5e-3)


@given(gap=st.floats(0.01, 3.0), t=st.floats(0.01, 4.0))
def test_zero_drift_limit_is_reflection_principle(gap, t):
    lin = o.meeting_cdf_linear(1e-12, gap, t)
    assert lin == pytest.approx(o.hitting_cdf_zero_drift(gap, t), abs=1e-9)
    assert o.meeting_cdf_linear(0.0, gap, t) == pytest.approx(o.hitting_cdf_zero_drift(gap, t),
                                                               abs=1e-15)


def test_zero_drift_meet_probability():
    assert o.hitting_cdf_zero_drift(0.5, 1.0) == pytest.approx(
        2 * (1 - float(mp.ncdf(0.5 / mp.sqrt(2)))), abs=1e-15)
    assert o.hitting_cdf_zero_drift(0.5, 1.0) == pytest.approx(0.7237, abs=1e-4)


def test_never_probability_is_survival_limit():
    assert o.meeting_never_prob_linear(-1.0, 0.0, 0.5) == 0.0
    assert o.meeting_never_prob_linear(1.0, 0.0, 0.5) == pytest.approx(
        o.meeting_survival_linear(1.0, 0.0, 0.5, 60.0), abs=1e-14)
    assert o.meeting_survival_linear(-1.0, 0.0, 0.5, 30.0) < 1e-6
    with pytest.raises(ValueError):
        o.meeting_never_prob_linear(1.0, 1.0, 0.0)


def _l_mpmath(t, u):
    dens = lambda s: u * s ** mp.mpf(-1.5) / (2 * mp.sqrt(mp.pi)) * mp.e ** (-u * u / (4 * s))
    return float(mp.quad(lambda s: (t - s) * dens(s), [0, min(t, u * u / 6), t]))


@pytest.mark.parametrize("t,u", [(1.0, 1.0), (0.1, 0.05), (2.0, 0.3), (0.5, 2.5), (1.0, 1e-4)])
def test_l_defect_routes_and_mpmath(t, u):
    ref = _l_mpmath(t, u)
    for method in ("closed", "hitting", "density"):
        assert o.l_defect(t, u, method) == pytest.approx(ref, abs=1e-9), method


def test_l_defect_edges():
    assert o.l_defect(0.7, 0.0) == 0.7
    with pytest.raises(ValueError):
        o.l_defect(0.0, 1.0)
    with pytest.raises(ValueError):
        o.l_defect(1.0, -1.0)
    with pytest.raises(ValueError):
        o.l_defect(1.0, 1.0, "magic")


def test_l_bound_constant_is_the_supremum():
    g = lambda s: math.exp(-1 / (4 * s)) * s ** -1.5 / (2 * math.sqrt(math.pi))
    res = optimize.minimize_scalar(lambda s: -g(s), bounds=(1e-3, 1.0), method="bounded",
                                   options={"xatol": 1e-12})
    assert res.x == pytest.approx(o.L_BOUND_SUP_POINT, abs=1e-6)
    assert -res.fun == pytest.approx(o.L_BOUND_K, rel=1e-12)


@given(t=st.floats(0.01, 1.0), u=st.floats(0.01, 3.0))
def test_l_below_both_bounds(t, u):
    val = o.l_defect(t, u, "closed")
    assert 0.0 <= val <= t
    assert val <= o.l_upper_bound(t, u) * (1 + 1e-12)


@pytest.mark.parametrize("C", [-1.0, 0.5, 1.0])
@pytest.mark.parametrize("t", [0.0025, 0.04, 1.0])
def test_cluster_size_against_mpmath(C, t):
    ref = float(mp.quad(lambda r: 1 - _survival_closed(C, r, t), [0, 1]))
    assert o.expected_cluster_size_linear(C, t) == pytest.approx(ref, abs=1e-12)


def _survival_closed(C, r, t):
    phi = (1 - mp.e ** (-2 * C * t)) / (2 * C)
    return mp.erf(r / (2 * mp.sqrt(phi)))


def test_cluster_small_time_ratio():
    lim = o.cluster_size_limit_constant()
    assert lim == pytest.approx(2 / math.sqrt(math.pi))
    for t in (1e-6, 1e-8):
        assert o.expected_cluster_size_linear(1.0, t) / math.sqrt(t) == pytest.approx(lim,
                                                                                      rel=1e-2)


def test_cluster_size_double_integral_with_scipy():
    C, t = 1.0, 0.01
    sd = math.sqrt(2 * o.phi_C(C, t))
    dens = lambda z: math.exp(-0.5 * (z / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    q = si.dblquad(lambda z, r: dens(z), 0.0, 1.0, lambda r: r, lambda r: r + 40 * sd)[0]
    assert o.expected_cluster_size_linear(C, t) == pytest.approx(2 * q, abs=1e-10)


def test_correlation_sum_cases():
    assert o.correlation_sum_expected(1, 0.0, 1.0, 0.0) == pytest.approx(1.0, abs=1e-10)
    # single block covering (s, t) with coincident start: l(1, r)
    assert o.correlation_sum_expected(1, 0.0, 1.0, 0.7) == pytest.approx(
        o.l_defect(1.0, 0.7, "density"), abs=1e-9)
    assert abs(o.correlation_sum_expected(8, 0.5, 0.6, 5.0)) < 1e-12
    vals = [o.correlation_sum_expected(n, 0.25, 0.75, 0.5) for n in (4, 16, 64)]
    assert vals[0] > vals[1] > vals[2] > 0
    with pytest.raises(ValueError):
        o.correlation_sum_expected(4, 0.8, 0.2, 0.0)


def test_expected_l_gaussian_by_scipy():
    h, mean, var = 0.3, 0.4, 0.2
    sd = math.sqrt(var)
    ref = si.quad(lambda x: o.l_defect(h, abs(x), "closed") * math.exp(-0.5 * ((x - mean) / sd) ** 2)
                  / (sd * math.sqrt(2 * math.pi)), -10, 10, points=[0.0], epsabs=1e-13)[0]
    assert o.expected_l_gaussian(h, mean, var) == pytest.approx(ref, abs=1e-10)
