import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from esoarm.eso import (
    BoundSpec, EsoState, error_bound, error_matrix, eso_step, estimation_error_bound,
    gains_from_bandwidth, discretize_bandwidth, rate_bound_from_trace, series_partial_sums,
    series_term,
)
from esoarm.faults import DivergentSeries, InvalidParameter, StepSizeFault


def _brute_series(omega, tol=1e-17):
    """Independent partial-sum oracle for r_i = 1, summed until terms vanish."""
    terms = [1.0, 1.0]
    k = 3
    while True:
        t = omega ** (k - 1) + (k - 1) * (1 - omega) * omega ** (k - 2)
        terms.append(t)
        if t < tol and k > 10:
            break
        k += 1
    return math.fsum(terms)


def _observe(f_of_t, omega, dt, duration, drift=0.0, gain_u=0.0):
    """Run the observer against x2' = drift + gain_u + f(t) sampled exactly.

    The true velocity is integrated with a fine trapezoid so the observer sees
    exact samples; returns times, f and f_hat after each step.
    """
    g = gains_from_bandwidth(omega)
    n = int(round(duration / dt))
    sub = 20
    h = dt / sub
    x2 = 0.0
    s = EsoState(np.array(0.0), np.array(0.0))
    ts, fs, fh = [], [], []
    t = 0.0
    for k in range(n):
        s = eso_step(s, g, drift, gain_u, x2, dt)
        for j in range(sub):
            a = t + j * h
            x2 += 0.5 * h * (f_of_t(a) + f_of_t(a + h)) + h * (drift + gain_u)
        t = (k + 1) * dt
        ts.append(t)
        fs.append(f_of_t(t))
        fh.append(float(s.xhat3))
    return np.array(ts), np.array(fs), np.array(fh)


# -- gains -----------------------------------------------------------------

def test_gains_example_80():
    g = gains_from_bandwidth(80.0)
    assert (float(g.beta1), float(g.beta2)) == (160.0, 6400.0)


def test_gains_example_1():
    g = gains_from_bandwidth(1.0)
    assert (float(g.beta1), float(g.beta2)) == (2.0, 1.0)


@pytest.mark.parametrize("bad", [0.0, -3.0, math.nan])
def test_gains_reject_non_positive(bad):
    with pytest.raises(InvalidParameter):
        gains_from_bandwidth(bad)


@given(st.floats(0.1, 1000.0))
def test_pole_placement(omega):
    A = error_matrix(gains_from_bandwidth(omega))
    # characteristic polynomial s^2 + b1 s + b2 must equal (s + omega)^2
    assert np.allclose(np.poly(A), [1.0, 2 * omega, omega ** 2], rtol=1e-12)
    assert np.allclose(np.linalg.eigvals(A).real, -omega, rtol=1e-6)


# -- stepping --------------------------------------------------------------

def test_equilibrium_is_fixed_point():
    g = gains_from_bandwidth(np.array([20.0, 40.0, 80.0]))
    s = EsoState(np.array([0.3, -0.2, 1.0]), np.zeros(3))
    out = eso_step(s, g, np.array([1.0, 2.0, 3.0]), np.array([-1.0, -2.0, -3.0]), s.xhat2, 1e-3)
    assert np.array_equal(out.xhat2, s.xhat2)
    assert np.array_equal(out.xhat3, s.xhat3)


def test_step_size_guard():
    g = gains_from_bandwidth(80.0)
    s = EsoState(np.array(0.0), np.array(0.0))
    with pytest.raises(StepSizeFault):
        eso_step(s, g, 0.0, 0.0, 0.0, 0.5 / 80)
    eso_step(s, g, 0.0, 0.0, 0.0, 0.49 / 80)


def test_constant_disturbance_converges():
    fbar = 7.5
    _, f, fh = _observe(lambda t: fbar, 80.0, 1e-4, 1.0, drift=0.4, gain_u=-1.1)
    assert abs(fh[-1] - fbar) < 1e-3 * abs(fbar)


def test_ramp_disturbance_within_bound():
    lf = 3.0
    ts, f, fh = _observe(lambda t: lf * t, 80.0, 1e-4, 1.0)
    gamma = float(error_bound(80.0, lf, 1e-4)[0])
    steady = ts > 0.2
    assert np.max(np.abs(f - fh)[steady]) <= gamma


def test_bandwidth_monotonicity():
    sup = []
    for w in (20.0, 40.0, 80.0):
        ts, f, fh = _observe(lambda t: 2.0 * np.sin(3.0 * t), w, 1e-3, 4.0)
        sup.append(np.max(np.abs(f - fh)[ts > 2.0]))
    assert sup[1] <= 1.05 * sup[0] and sup[2] <= 1.05 * sup[1]
    assert sup[2] < sup[0]


# -- discretisation --------------------------------------------------------

def test_discretize_example():
    assert discretize_bandwidth(80.0, 1e-4) == pytest.approx(0.9920319, abs=1e-7)


@given(st.floats(0.1, 500.0), st.floats(1e-5, 1e-2), st.floats(1.01, 3.0))
def test_discretize_decreasing(w, ts, factor):
    assert discretize_bandwidth(w * factor, ts) < discretize_bandwidth(w, ts)
    assert discretize_bandwidth(w, ts * factor) < discretize_bandwidth(w, ts)


def test_discretize_rejects_zero_sample_time():
    with pytest.raises(InvalidParameter):
        discretize_bandwidth(80.0, 0.0)


# -- error bound -----------------------------------------------------------

@given(st.floats(0.01, 0.999))
def test_first_terms_are_one(w):
    assert series_term(1, w) == 1.0 and series_term(2, w) == 1.0


def test_bound_closed_form():
    w = discretize_bandwidth(80.0, 1e-4)
    b = estimation_error_bound(BoundSpec(l_f=1.0, t_s=1e-4, omega_discrete=w))
    assert b.gamma == pytest.approx(2.0 / (1.0 - w) * 1e-4, rel=1e-9)
    assert b.gamma == pytest.approx(2.51e-2, rel=1e-3)


@pytest.mark.parametrize("w", [0.9, 0.99, 0.999])
def test_bound_matches_brute_force_sum(w):
    b = estimation_error_bound(BoundSpec(l_f=1.0, t_s=1.0, omega_discrete=w))
    assert b.series_sum == pytest.approx(_brute_series(w), rel=1e-9)
    assert b.series_sum == pytest.approx(2.0 / (1.0 - w), rel=1e-9)


@pytest.mark.parametrize("w", [0.9, 0.99, 0.999])
def test_truncation_is_converged(w):
    b = estimation_error_bound(BoundSpec(l_f=1.0, t_s=1.0, omega_discrete=w))
    K = b.truncation_terms
    S = series_partial_sums(w, 2 * K)
    assert abs(S[2 * K - 1] - S[K - 1]) < 1e-9 * S[K - 1]


def test_term_ratio_tends_to_omega():
    w = 0.95
    assert series_term(3001, w) / series_term(3000, w) == pytest.approx(w, rel=1e-3)


@pytest.mark.parametrize("w", [1.0, 1.5, 0.0])
def test_divergent_series(w):
    with pytest.raises(DivergentSeries):
        estimation_error_bound(BoundSpec(l_f=1.0, omega_discrete=w))


def test_zero_rate_bound_gives_zero():
    assert estimation_error_bound(BoundSpec(l_f=0.0)).gamma == 0.0


@given(st.floats(0.0, 100.0), st.floats(5.0, 300.0))
def test_bound_linear_in_rate(lf, w):
    one = float(error_bound(w, 1.0)[0])
    assert float(error_bound(w, lf)[0]) == pytest.approx(lf * one, rel=1e-12, abs=1e-300)


def test_rate_bound_from_trace():
    v = np.array([[0.0, 1.0], [0.5, 1.0], [0.25, 3.0]])
    assert np.allclose(rate_bound_from_trace(v, 0.5), [1.0, 4.0])
    with pytest.raises(InvalidParameter):
        rate_bound_from_trace(v[:1], 0.5)
