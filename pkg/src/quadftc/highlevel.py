"""Outer-loop cascade: PID position control and the two attitude laws.

The position loop returns a desired inertial acceleration that already
contains gravity compensation. The attitude laws turn it into body-rate and
body-z specific-thrust commands. The fault-free law steers body z and passes
the manual yaw rate through; the primary-axis law steers an arbitrary
body-fixed axis and leaves yaw unregulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sim import Array, QuadParams, body_z, rotate_inv

GRAVITY = 9.81
_EPS = 1e-6


@dataclass
class Command:
    """Body-rate command (rad/s) and desired specific thrust along body z (m/s^2)."""

    w_des: Array
    az_des: Array


@dataclass
class PidState:
    kp: Array = field(default_factory=lambda: np.full(3, 6.0))
    ki: Array = field(default_factory=lambda: np.full(3, 0.5))
    kd: Array = field(default_factory=lambda: np.full(3, 4.0))
    integral_limit: float = 2.0
    a_max: float = 2.0 * GRAVITY
    integral: Array = field(default_factory=lambda: np.zeros(3))

    def reset(self, batch: tuple[int, ...] = ()) -> None:
        self.integral = np.zeros(batch + (3,))

    def copy(self) -> "PidState":
        return PidState(
            kp=np.array(self.kp), ki=np.array(self.ki), kd=np.array(self.kd),
            integral_limit=self.integral_limit, a_max=self.a_max,
            integral=np.array(self.integral),
        )


def pid_position(p: Array, p_des: Array, v: Array, pid: PidState, dt: float) -> Array:
    """Desired inertial acceleration including ``+g`` along z.

    The output uses the integral accumulated so far; the accumulator is then
    advanced by ``(p_des - p) * dt`` and clamped.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    err = np.asarray(p_des) - np.asarray(p)
    a = pid.kp * err - pid.kd * np.asarray(v) + pid.ki * pid.integral
    a = a + np.array([0.0, 0.0, GRAVITY])
    pid.integral = np.clip(pid.integral + err * dt, -pid.integral_limit, pid.integral_limit)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.minimum(1.0, pid.a_max / np.maximum(norm, _EPS))
    return a * scale


def _safe_direction(a_des: Array) -> tuple[Array, Array]:
    a_des = np.asarray(a_des, dtype=float)
    norm = np.linalg.norm(a_des, axis=-1, keepdims=True)
    degenerate = norm < _EPS
    a_des = np.where(degenerate, np.array([0.0, 0.0, GRAVITY]), a_des)
    norm = np.where(degenerate, GRAVITY, norm)
    return a_des, norm


def _axis_error(current: Array, desired: Array) -> Array:
    """Rotation vector (angle * unit axis) turning ``current`` onto ``desired``."""
    cross = np.cross(current, desired)
    s = np.linalg.norm(cross, axis=-1, keepdims=True)
    c = np.sum(current * desired, axis=-1, keepdims=True)
    angle = np.arctan2(s, c)
    # antiparallel vectors: any perpendicular axis works, pick body x
    axis = np.where(s > 1e-9, cross / np.maximum(s, 1e-12), np.array([1.0, 0.0, 0.0]))
    return angle * axis


def attitude_fault_free(
    a_des: Array, q: Array, yaw_rate_des: Array | float = 0.0, k_att: float = 6.0
) -> Command:
    a_des, norm = _safe_direction(a_des)
    z_des_body = rotate_inv(q, a_des / norm)
    err = _axis_error(np.array([0.0, 0.0, 1.0]), z_des_body)
    w_des = k_att * err
    w_des[..., 2] = yaw_rate_des
    az = np.maximum(norm[..., 0] * z_des_body[..., 2], 0.0)
    return Command(w_des=w_des, az_des=az)


def primary_axis_attitude(
    a_des: Array,
    q: Array,
    n_body: Array = (0.0, 0.0, 1.0),
    k_att: float = 6.0,
    params: QuadParams | None = None,
    min_tilt_cos: float = 0.3,
) -> Command:
    """Steer the body-fixed axis ``n_body`` toward ``a_des``; yaw is left free.

    The returned yaw-rate entry is zero and carries no meaning. Specific
    thrust is sized so the vertical component of thrust matches ``a_des_z``.
    """
    params = params or QuadParams()
    a_des, _ = _safe_direction(a_des)
    n_body = np.asarray(n_body, dtype=float)
    a_hat = a_des / np.linalg.norm(a_des, axis=-1, keepdims=True)
    desired_body = rotate_inv(q, a_hat)
    err = _axis_error(np.broadcast_to(n_body, desired_body.shape), desired_body)
    w_des = k_att * err
    w_des[..., 2] = 0.0
    zb_up = np.maximum(body_z(q)[..., 2], min_tilt_cos)
    az = np.clip(a_des[..., 2] / zb_up, 0.0, 4.0 * params.f_max / params.mass)
    return Command(w_des=w_des, az_des=az)


def compute_primary_axis(q: Array) -> Array:
    """Inertial up expressed in body coordinates, i.e. ``R(q)^T e_z``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    n = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def policy_command(
    a_des: Array,
    q: Array,
    yaw_rate_des: Array | float = 0.0,
    k_att: float = 6.0,
    params: QuadParams | None = None,
) -> Command:
    """Fault-agnostic command fed to the learned policy.

    Tilt rates and specific thrust come from the primary-axis law with the
    axis on body z; the yaw-rate slot carries the manual yaw command.
    """
    cmd = primary_axis_attitude(a_des, q, (0.0, 0.0, 1.0), k_att, params)
    cmd.w_des[..., 2] = yaw_rate_des
    return cmd
