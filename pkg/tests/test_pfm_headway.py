import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import line9_like
from metro_str.oracle import headway_grid_argmin, headway_score_loop, random_headway_problem
from metro_str.pfm_headway import (
    DegenerateProblemError,
    HeadwayProblem,
    headway_problem_from_line,
    make_headway_problem,
    objective_F,
    optimize_headway,
    propagate_successor,
    sample_curve,
)


def _problem(stranded, alpha, beta, h_now=360.0, h_min=180.0, h_max=360.0, cap=1860.0, ww=0.5, wl=1.5):
    return make_headway_problem(np.asarray(stranded, float), np.asarray(alpha, float), np.asarray(beta, float),
                                cap, h_min, h_max, h_now, ww, wl)


def test_no_demand_outputs_zero():
    p = HeadwayProblem(0, np.zeros(4), np.zeros(4), np.zeros(4), 1860.0, 180.0, 360.0, 360.0, 0.5, 1.5)
    q, p_in, wait, load = propagate_successor(p, 240.0)
    for arr in (q, p_in, wait, load):
        np.testing.assert_array_equal(arr, 0.0)


def test_single_station_hand_values():
    p = _problem([200.0], [1.0], [0.0])
    q, p_in, wait, load = propagate_successor(p, 180.0)
    assert p_in[0] == 380.0 and q[0] == 0.0
    assert wait[0] == 52200.0
    assert load[0] == pytest.approx(380.0 / 1860.0)
    assert load[0] == pytest.approx(0.2043, abs=1e-4)


def test_saturated_station():
    p = _problem([1800.0], [1.0], [0.0])
    q, p_in, _, _ = propagate_successor(p, 360.0)
    assert p_in[0] == 1860.0
    assert q[0] == 300.0


def test_self_normalisation():
    p = _problem([300, 100, 0], [1.0, 0.5, 0.0], [0.0, 0.3, 1.0], h_now=300.0)
    assert objective_F(p, 300.0) == pytest.approx(-1.0, abs=1e-12)
    p2 = make_headway_problem(p.stranded, p.alpha, p.beta, 1860.0, 180.0, 360.0, 300.0, 0.8, 0.3)
    assert objective_F(p2, 300.0) == pytest.approx(0.5, abs=1e-12)


def test_pure_stranded_demand_makes_F_increasing():
    p = _problem([1900.0, 2000.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.1, 1.0])
    hs, fs = sample_curve(p, 200)
    assert np.all(np.diff(fs) > 0)
    assert optimize_headway(p).headway == 180.0


def test_degenerate_problem_rejected():
    with pytest.raises(DegenerateProblemError):
        _problem(np.zeros(3), np.zeros(3), [0.0, 0.0, 1.0])


def test_constant_score_returns_current_headway():
    p = make_headway_problem([100.0, 0.0], [1.0, 0.0], [0.0, 1.0], 1860.0, 180.0, 360.0, 275.0, 0.0, 0.0)
    assert optimize_headway(p).headway == 275.0


def test_congested_snapshot_shortens_headway():
    s = line9_like(alpha_scale=2.0)
    stranded = np.array([900, 1200, 1100, 800, 500, 200, 100, 0, 0, 0, 0, 0, 0], dtype=float)
    p = headway_problem_from_line(s, 10, stranded, 360.0)
    assert p.successor == 11
    res = optimize_headway(p)
    assert s.min_headway <= res.headway < 360.0


def test_matches_grid_oracle_on_random_problems():
    rng = np.random.default_rng(11)
    for _ in range(60):
        p = random_headway_problem(rng)
        res = optimize_headway(p)
        h_ref, f_ref = headway_grid_argmin(p)
        assert abs(res.headway - h_ref) <= 0.5
        assert abs(float(objective_F(p, res.headway)) - f_ref) <= 1e-9
        assert p.h_min <= res.headway <= p.h_max


def test_vectorised_F_matches_loop():
    rng = np.random.default_rng(5)
    p = random_headway_problem(rng, n_stations=9)
    hs = np.linspace(p.h_min, p.h_max, 37)
    fs = objective_F(p, hs)
    for h, f in zip(hs, fs):
        assert f == pytest.approx(headway_score_loop(p, h), abs=1e-12)


def test_continuous_mode_never_worse_than_lattice():
    rng = np.random.default_rng(8)
    for _ in range(30):
        p = random_headway_problem(rng)
        cont = optimize_headway(p, resolution=None)
        lat = optimize_headway(p)
        assert cont.score <= lat.score + 1e-12
        assert cont.headway >= p.h_min


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 50.0))
def test_weight_scaling_leaves_argmin(seed, k):
    p = random_headway_problem(np.random.default_rng(seed))
    q = make_headway_problem(p.stranded, p.alpha, p.beta, p.capacity, p.h_min, p.h_max, p.current_headway,
                             k * p.weight_wait, k * p.weight_load)
    assert optimize_headway(p).headway == optimize_headway(q).headway


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_successor_sweep_respects_passenger_invariants(seed):
    p = random_headway_problem(np.random.default_rng(seed))
    h = 0.5 * (p.h_min + p.h_max)
    q, p_in, wait, load = propagate_successor(p, h)
    assert np.all(p_in <= p.capacity + 1e-9) and np.all(p_in >= 0)
    assert np.all(q >= 0)
    assert np.all((load >= 0) & (load <= 1 + 1e-12))
    riders = 0.0
    for j in range(p.stranded.size):
        # demand splits into riders and stranded
        demand = p.stranded[j] + p.alpha[j] * h + (1 - p.beta[j]) * riders
        assert math.isclose(p_in[j] + q[j], demand, rel_tol=1e-12, abs_tol=1e-9)
        riders = p_in[j]


def test_curve_samples_span_bounds():
    p = random_headway_problem(np.random.default_rng(2))
    hs, fs = sample_curve(p, 129)
    assert hs[0] == p.h_min and hs[-1] == p.h_max and fs.shape == (129,)
