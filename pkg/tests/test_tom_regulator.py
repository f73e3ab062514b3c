import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_scenario
from metro_str.model_core import build_nominal_timetable
from metro_str.oracle import SmallRegulationInstance, random_regulation_instance, regulation_grid_optimum
from metro_str.tom_regulator import (
    RegulationDecision,
    TrafficState,
    apply_headway_shift,
    decide,
    deviation_step,
    execute_departure,
    objective_J,
    solve_qp,
    solve_regulation,
)


# ---- deviation dynamics

def test_deviation_step_examples():
    assert deviation_step(10, 0, -10, 0, 0) == 0
    assert deviation_step(10, 0, 0, 0, 0.5) == pytest.approx(20)
    assert deviation_step(0, 0, 0, 0, 0.37) == 0


def test_deviation_step_rejects_unit_delay_rate():
    with pytest.raises(ValueError):
        deviation_step(1, 0, 0, 0, 1.0)


@settings(max_examples=200, deadline=None)
@given(*[st.floats(-500, 500)] * 4, st.floats(0, 0.95))
def test_implicit_relation_reproduced(xp, xa, u, w, lam):
    x = deviation_step(xp, xa, u, w, lam)
    assert abs(xp + lam * (x - xa) + u + w - x) < 1e-9


# ---- objective

def test_objective_examples():
    z = np.zeros((2, 3))
    assert objective_J(z, z, z, 1, 1, 1) == 0
    x = np.zeros((1, 3))
    x[0, 1] = 68.0
    assert objective_J(x, np.zeros((1, 3)), np.zeros((1, 3)), 1, 1, 1, x_prev_train=np.zeros(3)) == 9248.0
    u1 = np.zeros((2, 3))
    u1[1, 2] = 5.0
    assert objective_J(z, u1, z, 1, 1, 1) == 25.0


# ---- headway shift

def _two_train_state(n=3):
    s = tiny_scenario(n=n, m=4)
    tt = build_nominal_timetable(s, 0.0)
    st0 = TrafficState.empty(4, n)
    return s, tt, st0


def test_shift_punctual_successor_picks_up_difference():
    s, tt, st0 = _two_train_state()
    st0.executed[0, 0] = True
    st0.actual_departure[0, 0] = tt.at(1, 1)
    new_tt, pending = apply_headway_shift(st0, tt, 360.0, 300.0, (1, 1), s.min_headway)
    assert pending[(2, 1)] == pytest.approx(60.0)
    assert new_tt.headway_in_force == 300.0


def test_shift_to_minimum_headway_moves_successor_uniformly():
    s, tt, st0 = _two_train_state()
    st0.executed[0, :] = True
    st0.actual_departure[0] = tt.scheduled_departure[0]
    _, pending = apply_headway_shift(st0, tt, 360.0, 180.0, (1, 3), s.min_headway)
    assert [pending[(2, j)] for j in (1, 2, 3)] == pytest.approx([180.0] * 3)


def test_shift_identity_and_rejection():
    s, tt, st0 = _two_train_state()
    st0.actual_departure[1, 0] = tt.at(2, 1) + 7.0
    new_tt, pending = apply_headway_shift(st0, tt, 360.0, 360.0, (1, 1), s.min_headway)
    assert pending[(2, 1)] == pytest.approx(7.0)
    np.testing.assert_allclose(new_tt.scheduled_departure, tt.scheduled_departure)
    with pytest.raises(ValueError):
        apply_headway_shift(st0, tt, 360.0, 120.0, (1, 1), s.min_headway)


# ---- solver

def test_nominal_state_needs_no_control():
    s, tt, st0 = _two_train_state()
    d = solve_regulation(st0, tt, s, (1, 1))
    assert np.all(d.u1 == 0) and np.all(d.u2 == 0)
    assert d.objective_J == 0 and d.feasible and d.converged


def test_single_disturbance_matches_grid_with_generous_boxes():
    inst = SmallRegulationInstance(
        predecessor=np.zeros(2), base=np.zeros(1), lam=np.zeros((1, 2)), w=np.array([[20.0, 0.0]]),
        gap=np.full((1, 2), 360.0), run_lo=np.array([-15.0]), run_hi=np.array([20.0]),
        dwell_lo=-10.0, dwell_hi=10.0, h_min=180.0)
    d = decide(inst.problem())
    j_grid, _ = regulation_grid_optimum(inst)
    assert d.feasible
    assert d.objective_J <= 1.01 * j_grid
    assert d.objective_J < 2 * 20.0 ** 2  # better than doing nothing


def test_two_followers_match_grid():
    inst = SmallRegulationInstance(
        predecessor=np.array([3.0, 6.0]), base=np.array([0.0, 0.0]), lam=np.array([[0.0, 0.1], [0.0, 0.2]]),
        w=np.array([[20.0, 0.0], [0.0, 4.0]]), gap=np.array([[185.0, 190.0], [300.0, 300.0]]),
        run_lo=np.array([-3.0]), run_hi=np.array([4.0]), dwell_lo=-4.0, dwell_hi=4.0, h_min=180.0)
    d = decide(inst.problem())
    j_grid, _ = regulation_grid_optimum(inst)
    assert d.objective_J <= 1.01 * j_grid + 1e-9


def test_random_instances_match_grid_and_stay_feasible():
    rng = np.random.default_rng(21)
    for _ in range(15):
        inst = random_regulation_instance(rng)
        p = inst.problem()
        d = decide(p)
        u = _flat(p, d)
        assert np.all(u >= p.lower) and np.all(u <= p.upper)
        assert np.all(p.headway_slack(u) >= 0)
        j_grid, _ = regulation_grid_optimum(inst)
        assert d.objective_J <= 1.01 * j_grid + 1e-9


def _flat(p, d):
    u = np.zeros(p.n_vars)
    for (i1, i2), a, b in zip(p.var_index, d.u1, d.u2):
        if i1 is not None:
            u[i1] = a
        u[i2] = b
    return u


def test_case_study_boxes_respected():
    s = tiny_scenario(n=4, m=3, disturbances={(1, 1): (0.0, 68.0)})
    tt = build_nominal_timetable(s, 0.0)
    d = solve_regulation(TrafficState.empty(3, 4), tt, s, (1, 1))
    for (i, j), a, b in zip(d.horizon, d.u1, d.u2):
        assert s.dwell_adjust_min <= b <= s.dwell_adjust_max
        if j > 1:
            assert -0.17 * 120 - 1e-12 <= a <= 0.53 * 120 + 1e-12


def test_infeasible_qp_is_flagged_not_raised():
    Q = np.eye(1)
    res = solve_qp(Q, np.zeros(1), np.array([-1.0]), np.array([1.0]), np.array([[1.0]]), np.array([5.0]))
    assert not res.feasible
    assert res.u[0] == pytest.approx(1.0)  # least violating control


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = random_regulation_instance(rng).problem()
        u = rng.uniform(p.lower, p.upper)
        g = p.gradient(u)
        fd = np.array([(p.objective(u + 1e-4 * e) - p.objective(u - 1e-4 * e)) / 2e-4 for e in np.eye(p.n_vars)])
        assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1.0)


def test_single_impulse_damped_monotonically():
    inst = SmallRegulationInstance(
        predecessor=np.zeros(3), base=np.zeros(1), lam=np.zeros((1, 3)), w=np.array([[12.0, 0.0, 0.0]]),
        gap=np.full((1, 3), 360.0), run_lo=np.array([-20.0, -20.0]), run_hi=np.array([60.0, 60.0]),
        dwell_lo=-10.0, dwell_hi=10.0, h_min=180.0)
    p = inst.problem()
    x = p.deviations(_flat(p, decide(p)))
    assert np.all(np.diff(np.abs(x)) <= 1e-9)


# ---- execution

def _decision(i, j, u1=0.0, u2=0.0):
    return RegulationDecision([(i, j)], np.array([u1]), np.array([u2]), 0.0, 0, True)


def test_punctual_execution_matches_timetable():
    s = tiny_scenario(n=2, m=2)
    tt = build_nominal_timetable(s, 0.0)
    st1 = execute_departure(TrafficState.empty(2, 2), tt, s, _decision(1, 1), 1, 1)
    st2 = execute_departure(st1, tt, s, _decision(1, 2), 1, 2)
    assert st2.actual_departure[0, 1] == tt.at(1, 2)
    assert st2.deviation[0, 1] == 0
    assert not st1.executed[0, 1]  # input untouched


def test_run_time_control():
    s = tiny_scenario(n=2, m=2)
    tt = build_nominal_timetable(s, 0.0)
    st1 = execute_departure(TrafficState.empty(2, 2), tt, s, _decision(1, 1), 1, 1)
    st2 = execute_departure(st1, tt, s, _decision(1, 2, u1=20.0), 1, 2)
    assert st2.actual_run[0, 1] == 140.0
    # departure identity
    assert st2.actual_departure[0, 1] == st2.actual_departure[0, 0] + st2.actual_run[0, 1] + st2.actual_dwell[0, 1]


def test_dispatch_disturbance_before_control():
    s = tiny_scenario(n=2, m=13, disturbances={(13, 1): (0.0, 68.0)})
    tt = build_nominal_timetable(s, 0.0)
    st0 = TrafficState.empty(13, 2)
    st0.actual_departure[11, 0] = tt.at(12, 1)
    st0.executed[11, 0] = True
    st1 = execute_departure(st0, tt, s, _decision(13, 1), 13, 1)
    assert st1.deviation[12, 0] >= 68.0


def test_too_close_departure_is_postponed():
    s = tiny_scenario(n=2, m=2)
    tt = build_nominal_timetable(s, 0.0)
    st0 = TrafficState.empty(2, 2)
    st0.actual_departure[0] = [0.0, 350.0]  # leader 200 s late at station 2
    st0.actual_departure[1, 0] = 360.0
    st0.executed[0, :] = True
    st0.executed[1, 0] = True
    st1 = execute_departure(st0, tt, s, _decision(2, 2), 2, 2)
    assert st1.postponed[1, 1]
    assert st1.actual_departure[1, 1] == 350.0 + s.min_headway


def test_dispatch_waits_behind_late_leader():
    s = tiny_scenario(n=2, m=2)
    tt = build_nominal_timetable(s, 0.0)
    st0 = TrafficState.empty(2, 2)
    st0.actual_departure[0, 0] = 250.0
    st0.executed[0, 0] = True
    st1 = execute_departure(st0, tt, s, _decision(2, 1), 2, 1)
    assert st1.actual_departure[1, 0] == 250.0 + s.min_headway
