"""Privileged model-based fault-tolerant expert.

Given the true failure coefficients the expert runs the PID position loop,
picks the fault-free attitude law (yaw controllable) or the primary-axis law
(yaw given up), converts the rate command into a torque by feedback
linearization and allocates rotor thrusts that account for the lost thrust.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .highlevel import Command, PidState, attitude_fault_free, pid_position, primary_axis_attitude
from .sim import Array, QuadParams, QuadState, drag, normalize_quat, quat_mul, quat_to_rotmat

YAW_CONTROLLABLE_THRESHOLD = 0.5


class AllocationError(ValueError):
    pass


@dataclass
class ExpertGains:
    K: Array = field(default_factory=lambda: np.array([20.0, 20.0, 8.0]))
    k_att: float = 6.0
    n_body: Array = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    # actuation latency: half a zero-order-hold step plus the rotor time constant
    latency: float = 0.035

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=float)
        if np.any(self.K <= 0):
            raise ValueError("rate gains must be positive")


def yaw_controllable(k: Array) -> Array:
    return np.min(k, axis=-1) > YAW_CONTROLLABLE_THRESHOLD


def feedback_linearization(w: Array, w_des: Array, J: Array, tau_a: Array, K: Array) -> Array:
    """Torque imposing ``w_dot = -K (w - w_des)`` on the rigid body."""
    J = np.asarray(J, dtype=float)
    if J.ndim == 2:
        J = np.diag(J)
    w = np.asarray(w, dtype=float)
    Jw = J * w
    return -J * (np.asarray(K) * (w - w_des)) - tau_a + np.cross(w, Jw)


def _allocate_full(wrench: Array, k: Array, params: QuadParams) -> Array:
    """Four-rotor solve; when bounds bind, yaw torque is sacrificed first.

    The (F, tau_x, tau_y) rows leave a one-dimensional null space along
    ``(1, -1, 1, -1)`` that only changes yaw torque, so the yaw-relaxed
    solution is the feasible point on that line closest to the exact one.
    """
    f = np.linalg.solve(params.mixer, wrench[..., None])[..., 0]
    hi = k * params.f_max
    null = np.array([1.0, -1.0, 1.0, -1.0])
    # feasible interval of s for f + s * null within [0, hi]
    lo_s = np.max(np.where(null > 0, -f, f - hi), axis=-1)
    hi_s = np.min(np.where(null > 0, hi - f, f), axis=-1)
    s = np.where(lo_s <= hi_s, np.clip(0.0, lo_s, hi_s), 0.5 * (lo_s + hi_s))
    f = f + s[..., None] * null
    return np.clip(f, 0.0, hi)


def _allocate_reduced(wrench: Array, failed: Array, params: QuadParams) -> Array:
    """Three healthy rotors produce (F, tau_x, tau_y); the failed one gets 0."""
    batch = wrench.shape[:-1]
    failed = np.broadcast_to(np.asarray(failed), batch)
    A = np.broadcast_to(params.mixer[:3], batch + (3, 4)).copy()
    cols = np.arange(4)
    keep_mask = cols != failed[..., None]
    keep = np.nonzero(keep_mask.reshape(-1, 4))[1].reshape(batch + (3,))
    A3 = np.take_along_axis(A, keep[..., None, :], axis=-1)
    det = np.linalg.det(A3)
    assert np.all(np.abs(det) > 1e-12), "reduced allocation is singular"
    f3 = np.linalg.solve(A3, wrench[..., :3, None])[..., 0]

    # the rotor opposite the failed one can only push one way; if it would go
    # negative, drop it and keep (F, side torque) with the remaining pair
    opposite = (failed + 2) % 4
    opp_slot = np.argmax(keep == opposite[..., None], axis=-1)
    f_opp = np.take_along_axis(f3, opp_slot[..., None], axis=-1)[..., 0]
    need_pair = f_opp < 0.0
    if np.any(need_pair):
        F = wrench[..., 0]
        on_x = (failed % 2) == 0
        tau_side = np.where(on_x, wrench[..., 1], wrench[..., 2])
        l = params.arm
        # failed on x axis (0 or 2): sides are 1 and 3, tau_x = l (f1 - f3) in code order
        # failed on y axis (1 or 3): sides are 0 and 2, tau_y = l (f2 - f0)
        a = 0.5 * F
        b = 0.5 * tau_side / l
        pair_x = np.stack([np.zeros_like(F), a + b, np.zeros_like(F), a - b], axis=-1)
        pair_y = np.stack([a - b, np.zeros_like(F), a + b, np.zeros_like(F)], axis=-1)
        pair = np.where(on_x[..., None], pair_x, pair_y)
    f = np.zeros(batch + (4,))
    np.put_along_axis(f, keep, f3, axis=-1)
    if np.any(need_pair):
        f = np.where(need_pair[..., None], pair, f)
    return np.clip(f, 0.0, params.f_max)


def allocate(
    tau_des: Array,
    az_des: Array,
    k: Array,
    yaw_ctrl: Array | bool,
    params: QuadParams,
    failed: Array | int | None = None,
) -> Array:
    """Commanded rotor thrusts realizing (m * az_des, tau_des) given ``k``.

    With yaw control the full mixer is inverted for effective thrusts which
    are then divided by ``k``. Without it the yaw row and the failed rotor's
    column are dropped. ``failed`` defaults to ``argmin(k)``.
    """
    tau_des = np.asarray(tau_des, dtype=float)
    k = np.asarray(k, dtype=float)
    batch = np.broadcast_shapes(tau_des.shape[:-1], np.shape(az_des), k.shape[:-1])
    tau_des = np.broadcast_to(tau_des, batch + (3,))
    k = np.broadcast_to(k, batch + (4,))
    yaw_ctrl = np.broadcast_to(np.asarray(yaw_ctrl, dtype=bool), batch)
    if np.any(yaw_ctrl & np.any(k <= 0.0, axis=-1)):
        raise AllocationError("yaw-controllable allocation requested with a dead rotor")
    F = params.mass * np.broadcast_to(np.asarray(az_des, dtype=float), batch)
    wrench = np.concatenate([F[..., None], tau_des], axis=-1)
    if failed is None:
        failed = np.argmin(k, axis=-1)

    u = np.zeros(batch + (4,))
    if np.any(yaw_ctrl):
        k_safe = np.where(yaw_ctrl[..., None], k, 1.0)
        f_full = _allocate_full(wrench, k_safe, params)
        u = np.where(yaw_ctrl[..., None], f_full / k_safe, u)
    if np.any(~yaw_ctrl):
        f_red = _allocate_reduced(wrench, failed, params)
        u = np.where(yaw_ctrl[..., None], u, f_red)
    return np.clip(u, 0.0, params.f_max)


def _rotation_over(w: Array, dt: float) -> Array:
    """Quaternion of the body rotation accumulated at constant rate ``w`` over ``dt``."""
    rate = np.linalg.norm(w, axis=-1, keepdims=True)
    axis = w / np.maximum(rate, 1e-12)
    half = 0.5 * rate * dt
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def attitude_command(
    a_des: Array,
    q: Array,
    yaw_ctrl: Array,
    gains: ExpertGains,
    params: QuadParams,
    yaw_rate_des: Array | float = 0.0,
) -> Command:
    ff = attitude_fault_free(a_des, q, yaw_rate_des, gains.k_att)
    if np.all(yaw_ctrl):
        return ff
    pa = primary_axis_attitude(a_des, q, gains.n_body, gains.k_att, params)
    sel = np.asarray(yaw_ctrl)
    return Command(
        w_des=np.where(sel[..., None], ff.w_des, pa.w_des),
        az_des=np.where(sel, ff.az_des, pa.az_des),
    )


def expert_action(
    state: QuadState,
    p_des: Array,
    k: Array,
    params: QuadParams,
    pid: PidState,
    gains: ExpertGains | None = None,
    dt: float = 0.02,
    yaw_rate_des: Array | float = 0.0,
    failed: Array | int | None = None,
) -> tuple[Array, Command]:
    """Thrust command of the privileged expert and the rate command behind it.

    ``pid`` is advanced in place. Rotors with ``k <= 0.5`` switch the expert
    to the primary-axis law.
    """
    a_des = pid_position(state.p, p_des, state.v, pid, dt)
    return expert_from_accel(state, a_des, k, params, gains, yaw_rate_des, failed)


def expert_from_accel(
    state: QuadState,
    a_des: Array,
    k: Array,
    params: QuadParams,
    gains: ExpertGains | None = None,
    yaw_rate_des: Array | float = 0.0,
    failed: Array | int | None = None,
) -> tuple[Array, Command]:
    """Expert inner loop for an already computed desired acceleration.

    While spinning at ~20 rad/s the body turns by ~0.7 rad between the
    command and the moment the rotors deliver it. The attitude law therefore
    sees the attitude predicted ``gains.latency`` ahead and the torque is
    expressed in that predicted body frame; without this the spin equilibrium
    is unstable at a 50 Hz command rate.
    """
    gains = gains or ExpertGains()
    k = np.asarray(k, dtype=float)
    yaw_ctrl = yaw_controllable(k)
    q_ahead = state.q
    turn = None
    if gains.latency > 0:
        turn = _rotation_over(state.w, gains.latency)
        q_ahead = normalize_quat(quat_mul(state.q, turn))
    cmd = attitude_command(a_des, q_ahead, yaw_ctrl, gains, params, yaw_rate_des)
    _, tau_a = drag(state.v, state.w, params)
    tau = feedback_linearization(state.w, cmd.w_des, params.J, tau_a, gains.K)
    if turn is not None:
        tau = np.einsum("...ji,...j->...i", quat_to_rotmat(turn), tau)
    u = allocate(tau, cmd.az_des, k, yaw_ctrl, params, failed)
    return u, cmd
