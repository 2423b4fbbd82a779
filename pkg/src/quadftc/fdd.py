"""Fault detection and diagnosis baseline: estimator, switching logic, switched expert.

The estimator is a Kalman filter on the four failure coefficients with a
random-walk process model. Rotor thrust enters the dynamics linearly in
``k``, so once the nominal (fault-free) motor response ``g`` to the commands
is known, both the body specific force and the body angular acceleration are
linear in ``k``::

    m * a_imu_z - drag_z          = sum_i k_i g_i
    J dw + w x Jw - tau_drag      = M_torque diag(g) k

The angular-acceleration measurement is the low-pass filtered finite
difference used by the policy, so the torque regressor and the gyroscopic
correction go through the same filter before they are compared with it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .expert import ExpertGains, expert_from_accel
from .highlevel import Command, PidState, pid_position
from .policy import FILTER_BETA
from .sim import Array, QuadParams, QuadState, drag, rotate_inv

log = logging.getLogger(__name__)

N_ROTORS = 4


class Mode(Enum):
    FAULT_FREE = "fault-free"
    PARTIAL = "partial"
    COMPLETE = "complete"


@dataclass(frozen=True)
class ControllerMode:
    kind: Mode = Mode.FAULT_FREE
    rotor: int | None = None

    def __str__(self) -> str:
        return self.kind.value if self.rotor is None else f"{self.kind.value}({self.rotor})"

    @property
    def rank(self) -> int:
        return {Mode.FAULT_FREE: 0, Mode.PARTIAL: 1, Mode.COMPLETE: 2}[self.kind]


@dataclass
class FddState:
    """Estimator state plus the switching bookkeeping of one control loop."""

    k_hat: Array = field(default_factory=lambda: np.ones(N_ROTORS))
    cov: Array = field(default_factory=lambda: 1e-4 * np.eye(N_ROTORS))
    process_noise: float = 2e-2
    meas_noise: Array = field(default_factory=lambda: np.array([0.2, 0.2, 0.2, 2e-3, 2e-3, 2e-3]))
    prior_var: float = 1e-4
    theta_partial: float = 0.85
    theta_complete: float = 0.15
    window: int = 5
    filter_beta: float = FILTER_BETA
    # nominal motor thrust (response to the commands with k = 1) and filtered regressors
    g: Array | None = None
    g_filt: Array | None = None
    gyro_filt: Array | None = None
    w_prev: Array | None = None
    below_partial: Array = field(default_factory=lambda: np.zeros(N_ROTORS, dtype=int))
    below_complete: Array = field(default_factory=lambda: np.zeros(N_ROTORS, dtype=int))
    mode: ControllerMode = field(default_factory=ControllerMode)
    events: list[tuple[float, str]] = field(default_factory=list)
    resets: int = 0

    @classmethod
    def start(cls, state: QuadState, **kw) -> "FddState":
        """Estimator primed with the vehicle's current rotor thrusts."""
        fdd = cls(**kw)
        fdd.g = np.array(state.f, dtype=float)
        fdd.g_filt = fdd.g.copy()
        fdd.gyro_filt = np.zeros(3)
        fdd.w_prev = np.array(state.w, dtype=float)
        return fdd


def torque_matrix(params: QuadParams) -> Array:
    """Rows of the mixer mapping rotor thrusts to body torque."""
    return params.mixer[1:]


def _mean_motor_response(g: Array, u: Array, dt: float, tau: float) -> tuple[Array, Array]:
    """End value and time average over ``dt`` of the first-order lag toward ``u``."""
    decay = np.exp(-dt / tau)
    end = u + (g - u) * decay
    mean = u + (g - u) * tau / dt * (1.0 - decay)
    return end, mean


def fdd_update(
    fdd: FddState,
    u: Array,
    imu_accel: Array,
    dw_filt: Array,
    state: QuadState,
    params: QuadParams,
    dt: float = 0.02,
    t: float | None = None,
) -> FddState:
    """One predict/update cycle after the step driven by command ``u``.

    ``imu_accel``, ``dw_filt`` and ``state`` describe the vehicle at the end
    of that step. The switching logic is advanced as well; ``t`` only stamps
    mode-change events.
    """
    if fdd.g is None:
        raise ValueError("FddState must be created with FddState.start(state)")
    u = np.clip(np.asarray(u, dtype=float), 0.0, params.f_max)
    J = params.J
    w = np.asarray(state.w, dtype=float)
    beta = fdd.filter_beta

    g_end, g_mean = _mean_motor_response(fdd.g, u, dt, params.tau_motor)
    fdd.g = g_end
    fdd.g_filt = beta * fdd.g_filt + (1.0 - beta) * g_mean
    _, tau_a = drag(state.v, w, params)
    gyro = 0.5 * (np.cross(fdd.w_prev, J * fdd.w_prev) + np.cross(w, J * w)) - tau_a
    fdd.gyro_filt = beta * fdd.gyro_filt + (1.0 - beta) * gyro
    fdd.w_prev = w.copy()

    F_a, _ = drag(state.v, w, params)
    lin = params.mass * np.asarray(imu_accel, dtype=float) - rotate_inv(state.q, F_a)
    ang = J * np.asarray(dw_filt, dtype=float) + fdd.gyro_filt
    y = np.concatenate([lin, ang])
    H = np.zeros((6, N_ROTORS))
    H[2] = fdd.g
    H[3:] = torque_matrix(params) * fdd.g_filt

    # random-walk prediction
    P = fdd.cov + fdd.process_noise**2 * np.eye(N_ROTORS)
    if np.max(np.abs(H)) > 1e-9:
        R = np.diag(np.asarray(fdd.meas_noise, dtype=float) ** 2)
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        innov = y - H @ fdd.k_hat
        fdd.k_hat = fdd.k_hat + K @ innov
        IKH = np.eye(N_ROTORS) - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)) or np.min(np.linalg.eigvalsh(P)) <= 0.0:
        log.warning("FDD covariance lost positive definiteness; resetting to prior")
        P = fdd.prior_var * np.eye(N_ROTORS)
        fdd.resets += 1
    fdd.cov = P
    fdd.k_hat = np.clip(fdd.k_hat, 0.0, 1.0)
    switch_logic(fdd, t)
    return fdd


def switch_logic(fdd: FddState, t: float | None = None) -> ControllerMode:
    """Debounced, monotone controller switching from the current estimate.

    A rotor is declared partially failed after ``window`` consecutive
    estimates below ``theta_partial`` and completely failed after ``window``
    consecutive estimates below ``theta_complete``. Once a rotor is declared,
    only an escalation of that same rotor is possible.
    """
    k = np.asarray(fdd.k_hat)
    fdd.below_partial = np.where(k < fdd.theta_partial, fdd.below_partial + 1, 0)
    fdd.below_complete = np.where(k < fdd.theta_complete, fdd.below_complete + 1, 0)
    current = fdd.mode
    candidates = range(N_ROTORS) if current.rotor is None else [current.rotor]
    new = current
    for i in candidates:
        if fdd.below_complete[i] >= fdd.window:
            proposal = ControllerMode(Mode.COMPLETE, i)
        elif fdd.below_partial[i] >= fdd.window:
            proposal = ControllerMode(Mode.PARTIAL, i)
        else:
            continue
        if proposal.rank > new.rank or (proposal.rank == new.rank and new.rotor is None):
            # several rotors may qualify on the same step; keep the weakest one
            if new.rotor is None or proposal.rank > new.rank or k[i] < k[new.rotor]:
                new = proposal
    if new != current:
        fdd.mode = new
        stamp = float("nan") if t is None else float(t)
        fdd.events.append((stamp, str(new)))
        log.info("t=%.2f s: controller switched to %s", stamp, new)
    return fdd.mode


def controller_coefficients(fdd: FddState) -> tuple[Array, int | None]:
    """Failure coefficients and failed rotor handed to the expert for the current mode."""
    k = np.ones(N_ROTORS)
    mode = fdd.mode
    if mode.kind is Mode.PARTIAL:
        k[mode.rotor] = fdd.k_hat[mode.rotor]
    elif mode.kind is Mode.COMPLETE:
        k[mode.rotor] = 0.0
    return k, mode.rotor


def aftc_with_fdd(
    state: QuadState,
    p_des: Array,
    fdd: FddState,
    params: QuadParams,
    pid: PidState,
    gains: ExpertGains | None = None,
    dt: float = 0.02,
    yaw_rate_des: float = 0.0,
) -> tuple[Array, Command]:
    """Expert action driven by the estimated coefficients and switched mode."""
    a_des = pid_position(state.p, p_des, state.v, pid, dt)
    k, failed = controller_coefficients(fdd)
    if failed is not None and k[failed] > 0.5:
        failed = None
    return expert_from_accel(state, a_des, k, params, gains, yaw_rate_des, failed)
