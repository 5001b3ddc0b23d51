import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lavps.schedule import bridge, coarse_grid, make_schedule, switch_bound, transition


def test_linear_flow_values(sched10):
    assert sched10.alpha[0] == 1.0 and sched10.sigma[0] == 0.0
    assert sched10.alpha[10] == 0.0 and sched10.sigma[10] == 1.0
    assert sched10.alpha[8] == pytest.approx(0.2) and sched10.sigma[8] == pytest.approx(0.8)


@pytest.mark.parametrize("T", [0, 1, -3])
def test_rejects_small_T(T):
    with pytest.raises(ValueError):
        make_schedule(T)


def test_rejects_bad_type_and_kind():
    with pytest.raises(TypeError):
        make_schedule(10.0)
    with pytest.raises(ValueError, match="unknown schedule kind"):
        make_schedule(10, "cosine")


def test_schedule_arrays_read_only(sched10):
    with pytest.raises(ValueError):
        sched10.alpha[1] = 0.5


@given(st.integers(2, 2000))
def test_snr_strictly_decreasing(T):
    s = make_schedule(T)
    snr = s.snr(np.arange(1, T + 1))
    assert np.all(np.diff(snr) < 0)


def test_transition_examples(sched10):
    assert transition(sched10, 5, 5) == (1.0, 0.0)
    a, v = transition(sched10, 4, 8)
    assert a == pytest.approx(1 / 3) and v == pytest.approx(0.64 - 0.16 / 9)
    a, v = transition(sched10, 0, 8)
    assert a == pytest.approx(0.2) and v == pytest.approx(0.64)


def test_transition_errors(sched10):
    with pytest.raises(ValueError):
        transition(sched10, 5, 4)
    with pytest.raises(ValueError):
        transition(sched10, 10, 10)


def test_transition_monte_carlo(sched10):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=200_000)
    x4 = sched10.alpha[4] * x0 + sched10.sigma[4] * rng.normal(size=x0.size)
    a, v = transition(sched10, 4, 8)
    x8 = a * x4 + math.sqrt(v) * rng.normal(size=x0.size)
    resid = x8 - sched10.alpha[8] * x0
    assert resid.var() == pytest.approx(sched10.sigma[8] ** 2, rel=0.02)


@given(st.integers(3, 500), st.data())
def test_transition_composes(T, data):
    sched = make_schedule(T)
    s = data.draw(st.integers(0, T - 3))
    t = data.draw(st.integers(s + 1, T - 2))
    u = data.draw(st.integers(t + 1, T - 1))
    a_ts, v_ts = transition(sched, s, t)
    a_ut, v_ut = transition(sched, t, u)
    a_us, v_us = transition(sched, s, u)
    assert a_us == pytest.approx(a_ut * a_ts, rel=1e-12)
    assert v_us == pytest.approx(a_ut**2 * v_ts + v_ut, rel=1e-10, abs=1e-14)


def test_bridge_hand_values(sched10):
    b = bridge(sched10, 4, 8)
    assert b.mean_coeff_x0 == pytest.approx(0.5833333, abs=1e-7)
    assert b.mean_coeff_xt == pytest.approx(0.0833333, abs=1e-7)
    assert b.variance == pytest.approx(0.1555556, abs=1e-7)


def test_bridge_boundaries(sched10):
    assert tuple(bridge(sched10, 6, 6)) == (0.0, 1.0, 0.0)
    b = bridge(sched10, 0, 6)
    assert b.mean_coeff_x0 == 1.0 and b.mean_coeff_xt == 0.0 and b.variance == 0.0
    b = bridge(sched10, 3, 10)  # alpha_T = 0 stays finite
    assert np.isfinite(b).all()
    with pytest.raises(ValueError):
        bridge(sched10, 0, 0)


def _conjugate(sched, s, t, x0, xt):
    """Completing the square in precision form."""
    a_s, s_s = sched.alpha[s], sched.sigma[s]
    a_ts = sched.alpha[t] / a_s
    v_ts = sched.sigma[t] ** 2 - a_ts**2 * s_s**2
    prec = 1 / s_s**2 + a_ts**2 / v_ts
    mean = (a_s * x0 / s_s**2 + a_ts * xt / v_ts) / prec
    return mean, 1 / prec


def test_bridge_matches_conjugation():
    rng = np.random.default_rng(1)
    for _ in range(200):
        T = int(rng.integers(3, 2000))
        sched = make_schedule(T)
        t = int(rng.integers(2, T + 1))
        s = int(rng.integers(1, t))
        x0, xt = rng.normal(size=2)
        b = bridge(sched, s, t)
        mean, var = _conjugate(sched, s, t, x0, xt)
        assert b.mean_coeff_x0 * x0 + b.mean_coeff_xt * xt == pytest.approx(mean, abs=1e-8)
        assert b.variance == pytest.approx(var, abs=1e-8)


def test_bridge_vectorised(sched):
    s = np.array([1, 10, 200])
    t = np.array([2, 50, 1000])
    b = bridge(sched, s, t)
    for i in range(3):
        bi = bridge(sched, int(s[i]), int(t[i]))
        assert np.allclose([b[j][i] for j in range(3)], bi)


@given(st.integers(2, 3000), st.data())
def test_coarse_grid(T, data):
    K = data.draw(st.integers(2, T))
    g = coarse_grid(T, K)
    assert g[0] == 0 and g[-1] == T and len(g) == K + 1
    assert np.all(np.diff(g) > 0)


def test_coarse_grid_errors():
    with pytest.raises(ValueError):
        coarse_grid(10, 1)
    with pytest.raises(ValueError):
        coarse_grid(10, 11)


def test_switch_bound():
    assert switch_bound(1000, 0.8) == 200
    assert switch_bound(1000, 0.7) == 300
    assert switch_bound(1000, 1.0) == 0
    assert switch_bound(1000, 0.0) == 1000
    assert switch_bound(10, 0.75) == 3
    with pytest.raises(ValueError):
        switch_bound(10, 1.5)
