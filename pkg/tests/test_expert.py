from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadftc.expert import AllocationError, ExpertGains, allocate, expert_action, feedback_linearization, yaw_controllable
from quadftc.highlevel import PidState
from quadftc.sim import FaultConfig, QuadParams, QuadState, allocation, step


def test_feedback_linearization_rest_and_principal_spin(params):
    K = np.array([20.0, 20.0, 8.0])
    np.testing.assert_array_equal(feedback_linearization(np.zeros(3), np.zeros(3), params.J, np.zeros(3), K), 0.0)
    spin = np.array([0.0, 0.0, 10.0])
    np.testing.assert_allclose(feedback_linearization(spin, spin, params.J, np.zeros(3), K), 0.0, atol=1e-15)


def test_feedback_linearization_hand_value(params):
    tau = feedback_linearization(np.array([1.0, 0, 0]), np.zeros(3), params.J, np.zeros(3), np.full(3, 20.0))
    np.testing.assert_allclose(tau, [-0.072, 0.0, 0.0], atol=1e-15)


def test_feedback_linearization_accepts_matrix_inertia(params, rng):
    w, w_des, tau_a = rng.standard_normal((3, 3))
    K = np.array([20.0, 20.0, 8.0])
    np.testing.assert_allclose(
        feedback_linearization(w, w_des, np.diag(params.J), tau_a, K),
        feedback_linearization(w, w_des, params.J, tau_a, K),
    )


def test_feedback_linearization_is_exact(params, rng):
    """Closed-loop angular acceleration equals -K (w - w_des) at random states."""
    J = params.J
    K = rng.uniform(1, 30, (1000, 3))
    w = rng.uniform(-30, 30, (1000, 3))
    w_des = rng.uniform(-30, 30, (1000, 3))
    tau_a = rng.standard_normal((1000, 3)) * 0.05
    tau = feedback_linearization(w, w_des, J, tau_a, K)
    w_dot = (tau - np.cross(w, J * w) + tau_a) / J
    np.testing.assert_allclose(w_dot, -K * (w - w_des), atol=1e-10)


def test_gains_validation():
    with pytest.raises(ValueError):
        ExpertGains(K=np.array([20.0, 0.0, 8.0]))


def test_yaw_controllability_boundary():
    assert yaw_controllable(np.array([1.0, 0.51, 1.0, 1.0]))
    assert not yaw_controllable(np.array([1.0, 0.5, 1.0, 1.0]))


def test_allocate_hover(params):
    u = allocate(np.zeros(3), 9.81, np.ones(4), True, params)
    np.testing.assert_allclose(u, 1.8737, atol=1e-4)
    np.testing.assert_allclose(u, params.mass * 9.81 / 4, atol=1e-12)


def test_allocate_complete_failure_pairs_opposite_rotors(params):
    T = 8.0
    u = allocate(np.zeros(3), T / params.mass, np.array([1.0, 0.0, 1.0, 1.0]), False, params)
    np.testing.assert_allclose(u, [T / 2, 0.0, T / 2, 0.0], atol=1e-12)


def test_allocate_partial_fault_scales_by_effectiveness(params):
    healthy = allocate(np.zeros(3), 9.81, np.ones(4), True, params)
    u = allocate(np.zeros(3), 9.81, np.array([1.0, 0.8, 1.0, 1.0]), True, params)
    assert u[1] == pytest.approx(1.25 * healthy[1], abs=1e-12)
    np.testing.assert_allclose(u[[0, 2, 3]], healthy[[0, 2, 3]], atol=1e-12)


def test_allocate_rejects_dead_rotor_with_yaw(params):
    with pytest.raises(AllocationError):
        allocate(np.zeros(3), 9.81, np.array([1.0, 0.0, 1.0, 1.0]), True, params)


def test_allocate_saturation_keeps_thrust_over_yaw(params):
    # a yaw torque far beyond what the rotors can make at this thrust
    u = allocate(np.array([0.0, 0.0, 5.0]), 9.81, np.ones(4), True, params)
    F, tau = allocation(u, params)
    assert F == pytest.approx(params.mass * 9.81, abs=1e-9)
    np.testing.assert_allclose(tau[:2], 0.0, atol=1e-12)
    assert tau[2] > 0.0
    assert np.all((u >= 0) & (u <= params.f_max))


wrenches = st.tuples(
    st.floats(5.0, 20.0),
    arrays(np.float64, 3, elements=st.floats(-0.1, 0.1)),
)


@settings(max_examples=200)
@given(wrenches)
def test_full_allocation_round_trip(wrench):
    params = QuadParams()
    az, tau = wrench
    tau = tau * np.array([1.0, 1.0, 0.2])
    u = allocate(tau, az, np.ones(4), True, params)
    if np.any(u <= 0) or np.any(u >= params.f_max):
        return
    F, tau_out = allocation(u, params)
    assert F == pytest.approx(params.mass * az, abs=1e-9)
    np.testing.assert_allclose(tau_out, tau, atol=1e-9)


@settings(max_examples=200)
@given(wrenches, st.integers(0, 3))
def test_reduced_allocation_round_trip(wrench, rotor):
    params = QuadParams()
    az, tau = wrench
    k = np.ones(4)
    k[rotor] = 0.0
    u = allocate(tau, az, k, False, params)
    assert u[rotor] == 0.0
    healthy = np.delete(u, rotor)
    if np.any(healthy <= 0) or np.any(healthy >= params.f_max):
        return
    F, tau_out = allocation(u, params)
    assert F == pytest.approx(params.mass * az, abs=1e-9)
    np.testing.assert_allclose(tau_out[:2], tau[:2], atol=1e-9)


def test_allocate_batched_matches_single(params, rng):
    tau = rng.standard_normal((5, 3)) * 0.05
    az = rng.uniform(8, 12, 5)
    k = np.ones((5, 4))
    k[[1, 3], [2, 0]] = 0.0
    yaw = yaw_controllable(k)
    batched = allocate(tau, az, k, yaw, params)
    for i in range(5):
        np.testing.assert_allclose(batched[i], allocate(tau[i], az[i], k[i], yaw[i], params), atol=1e-14)


def test_expert_hovers_at_goal(params):
    state = QuadState.hover(params, p=(0, 0, 3.0))
    u, _ = expert_action(state, np.array([0, 0, 3.0]), np.ones(4), params, PidState(), ExpertGains(latency=0.0))
    np.testing.assert_allclose(u, params.hover_thrust, atol=1e-9)


def _fly(params, state, k, t_fault, seconds, p_des):
    fault = FaultConfig(k=np.asarray(k, dtype=float), t_fault=t_fault)
    pid = PidState()
    rows = []
    for i in range(int(seconds / 0.02)):
        t = i * 0.02
        u, _ = expert_action(state, p_des, fault.effective_k(t), params, pid)
        state, done = step(state, u, fault, t, params)
        assert not done, f"terminated at t={t:.2f}"
        rows.append(np.concatenate([state.p, state.w]))
    return np.array(rows)


def test_expert_partial_fault_keeps_yaw(params):
    p_des = np.array([0.0, 0.0, 3.0])
    traj = _fly(params, QuadState.hover(params, p=p_des), [1.0, 0.6, 1.0, 1.0], 1.0, 8.0, p_des)
    tail = traj[-100:]
    assert np.max(np.abs(tail[:, 5])) < 0.5
    assert np.max(np.linalg.norm(tail[:, :3] - p_des, axis=1)) < 0.05


@pytest.mark.parametrize("rotor", range(4))
def test_expert_recovers_complete_failure(params, rotor):
    p_des = np.array([0.0, 0.0, 3.0])
    k = np.ones(4)
    k[rotor] = 0.0
    traj = _fly(params, QuadState.hover(params, p=p_des), k, 1.0, 10.0, p_des)
    xy = np.linalg.norm(traj[:, :2] - p_des[:2], axis=1)
    assert xy.max() < 1.0
    settled = np.linalg.norm(traj[-50:, :3] - p_des, axis=1)
    assert settled.mean() < 0.2
    assert np.abs(traj[-50:, 5]).max() > 5.0  # yaw given up: the vehicle spins
    assert np.abs(traj[:, 5]).max() < 25.0
