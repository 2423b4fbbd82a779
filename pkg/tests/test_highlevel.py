from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadftc.expert import allocate, expert_action, feedback_linearization
from quadftc.highlevel import (
    PidState,
    attitude_fault_free,
    compute_primary_axis,
    pid_position,
    policy_command,
    primary_axis_attitude,
)
from quadftc.sim import FaultConfig, QuadParams, QuadState, drag, quat_from_axis_angle, rotate, step

G = 9.81
unit_quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1).map(
    lambda q: q / np.linalg.norm(q)
)
accels = arrays(np.float64, 3, elements=st.floats(-15, 15)).map(lambda a: a + np.array([0, 0, G]))


def test_pid_gravity_only_at_setpoint():
    pid = PidState()
    a = pid_position(np.zeros(3), np.zeros(3), np.zeros(3), pid, 0.02)
    np.testing.assert_array_equal(a, [0, 0, G])
    np.testing.assert_array_equal(pid.integral, 0.0)


def test_pid_proportional_term():
    pid = PidState(kp=np.full(3, 4.0))
    a = pid_position(np.zeros(3), np.array([1.0, 0, 0]), np.zeros(3), pid, 0.02)
    np.testing.assert_allclose(a, [4.0, 0, G])


def test_pid_integral_clamps():
    pid = PidState(integral_limit=2.0)
    for _ in range(1000):
        pid_position(np.zeros(3), np.array([1.0, -1.0, 0.0]), np.zeros(3), pid, 0.02)
    np.testing.assert_allclose(pid.integral, [2.0, -2.0, 0.0])


def test_pid_acceleration_limit():
    pid = PidState()
    a = pid_position(np.zeros(3), np.array([100.0, 0, 0]), np.zeros(3), pid, 0.02)
    assert np.linalg.norm(a) == pytest.approx(pid.a_max)


def test_pid_rejects_bad_dt():
    with pytest.raises(ValueError):
        pid_position(np.zeros(3), np.zeros(3), np.zeros(3), PidState(), 0.0)


def test_fault_free_hover_and_yaw_passthrough():
    q = np.array([1.0, 0, 0, 0])
    cmd = attitude_fault_free(np.array([0, 0, G]), q, 0.0)
    np.testing.assert_allclose(cmd.w_des, 0.0, atol=1e-15)
    assert cmd.az_des == pytest.approx(G)
    cmd = attitude_fault_free(np.array([0, 0, G]), q, 1.0)
    np.testing.assert_allclose(cmd.w_des, [0, 0, 1.0], atol=1e-15)


def test_fault_free_quarter_turn_error():
    # body rolled +90 deg about x: body z points along inertial -y, so roll back
    q = quat_from_axis_angle(np.array([1.0, 0, 0]), np.pi / 2)
    cmd = attitude_fault_free(np.array([0, 0, G]), q, 0.0, k_att=6.0)
    assert cmd.w_des[0] == pytest.approx(-6.0 * np.pi / 2)
    assert cmd.w_des[1] == pytest.approx(0.0, abs=1e-12)


def test_degenerate_acceleration_falls_back_to_hover():
    cmd = attitude_fault_free(np.zeros(3), np.array([1.0, 0, 0, 0]))
    np.testing.assert_allclose(cmd.w_des, 0.0, atol=1e-15)
    assert cmd.az_des == pytest.approx(G)


def test_primary_axis_aligned_gives_zero_tilt_rates():
    n_body = np.array([np.sin(0.3), 0.0, np.cos(0.3)])
    q = quat_from_axis_angle(np.array([0.2, -0.5, 0.1]), 0.4)
    a_des = 12.0 * rotate(q, n_body)
    cmd = primary_axis_attitude(a_des, q, n_body)
    np.testing.assert_allclose(cmd.w_des[:2], 0.0, atol=1e-12)


@settings(max_examples=100)
@given(accels, unit_quats)
def test_primary_axis_matches_fault_free_for_body_z(a_des, q):
    ff = attitude_fault_free(a_des, q)
    pa = primary_axis_attitude(a_des, q, (0, 0, 1))
    np.testing.assert_allclose(pa.w_des[:2], ff.w_des[:2], atol=1e-10)
    assert pa.w_des[2] == 0.0
    params = QuadParams()
    assert 0.0 <= pa.az_des <= 4 * params.f_max / params.mass


def test_compute_primary_axis_examples():
    np.testing.assert_allclose(compute_primary_axis(np.array([1.0, 0, 0, 0])), [0, 0, 1])
    q = quat_from_axis_angle(np.array([1.0, 0, 0]), np.pi / 2)
    np.testing.assert_allclose(compute_primary_axis(q), [0, 1, 0], atol=1e-12)


@given(unit_quats)
def test_compute_primary_axis_is_unit(q):
    assert abs(np.linalg.norm(compute_primary_axis(q)) - 1.0) < 1e-12


def test_policy_command_carries_manual_yaw():
    q = quat_from_axis_angle(np.array([0.3, 1.0, 0.0]), 0.2)
    a_des = np.array([1.0, -2.0, 10.0])
    cmd = policy_command(a_des, q, 0.7)
    pa = primary_axis_attitude(a_des, q)
    np.testing.assert_allclose(cmd.w_des[:2], pa.w_des[:2])
    assert cmd.w_des[2] == 0.7
    assert cmd.az_des == pa.az_des


def test_tilted_primary_axis_rights_itself(no_drag):
    """Healthy vehicle steering a body axis 10 deg off z toward a vertical command.

    The position loop stays open: a non-spinning vehicle thrusts along body
    z, so holding position would pull the axis back off vertical.
    """
    params = no_drag
    n_body = np.array([np.sin(np.radians(10)), 0.0, np.cos(np.radians(10))])
    state = QuadState.hover(params, p=(0, 0, 50.0))
    K = np.array([20.0, 20.0, 8.0])
    a_des = np.array([0.0, 0.0, G])
    for i in range(100):
        cmd = primary_axis_attitude(a_des, state.q, n_body, 6.0, params)
        _, tau_a = drag(state.v, state.w, params)
        tau = feedback_linearization(state.w, cmd.w_des, params.J, tau_a, K)
        u = allocate(tau, cmd.az_des, np.ones(4), True, params)
        state, done = step(state, u, FaultConfig(), i * 0.02, params)
        assert not done
    up = rotate(state.q, n_body)
    assert np.degrees(np.arccos(np.clip(up[2], -1, 1))) < 1.0


def test_expert_closes_position_loop(params):
    state = QuadState.hover(params, p=(1.0, 0.0, 3.0))
    pid = PidState()
    p_des = np.array([0.0, 0.0, 3.0])
    for i in range(200):
        u, _ = expert_action(state, p_des, np.ones(4), params, pid)
        state, done = step(state, u, FaultConfig(), i * 0.02, params)
        assert not done
    assert np.linalg.norm(state.p - p_des) < 0.05
