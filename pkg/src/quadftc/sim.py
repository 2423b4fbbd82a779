"""Quadrotor rigid-body dynamics with per-rotor failure coefficients.

Every function accepts arrays with arbitrary leading batch dimensions: a
position is ``(..., 3)``, a quaternion ``(..., 4)`` in ``(w, x, y, z)`` order,
rotor vectors ``(..., 4)``. A single vehicle is just the empty batch shape, and
the training environments step hundreds of vehicles with the same calls.

Frames: the inertial frame has z pointing up (gravity is ``(0, 0, -g)``); the
quaternion maps body vectors into the inertial frame. Rotors are numbered 0-3
in code (1-4 on the airframe drawing); rotors 1 and 3 (code) sit on the body
y axis, rotors 0 and 2 on the body x axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

N_SUBSTEPS = 4


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.764
    inertia: tuple[float, float, float] = (0.0036, 0.0029, 0.0053)
    arm: float = 0.125
    tau_motor: float = 0.025
    k_m: float = 0.022
    g: float = 9.81
    f_max: float = 13.0
    c_d: float = 0.05
    c_r: float = 0.008
    omega_hard: float = 35.0

    def __post_init__(self) -> None:
        if self.mass <= 0 or self.arm <= 0 or self.tau_motor <= 0 or self.f_max <= 0:
            raise ValueError("mass, arm, tau_motor and f_max must be positive")
        if min(self.inertia) <= 0:
            raise ValueError("inertia entries must be positive")
        if self.c_d < 0 or self.c_r < 0:
            raise ValueError("drag coefficients must be non-negative")

    @property
    def J(self) -> Array:
        return np.asarray(self.inertia, dtype=float)

    @property
    def gravity(self) -> Array:
        return np.array([0.0, 0.0, -self.g])

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g / 4.0

    @property
    def mixer(self) -> Array:
        """4x4 map from rotor thrusts to (F, tau_x, tau_y, tau_z)."""
        l, km = self.arm, self.k_m
        return np.array(
            [
                [1.0, 1.0, 1.0, 1.0],
                [0.0, l, 0.0, -l],
                [-l, 0.0, l, 0.0],
                [km, -km, km, -km],
            ]
        )


@dataclass
class QuadState:
    p: Array
    v: Array
    q: Array
    w: Array
    f: Array

    @classmethod
    def hover(cls, params: QuadParams, p=(0.0, 0.0, 3.0), batch: tuple[int, ...] = ()) -> "QuadState":
        p = np.broadcast_to(np.asarray(p, dtype=float), batch + (3,)).copy()
        q = np.zeros(batch + (4,))
        q[..., 0] = 1.0
        return cls(
            p=p,
            v=np.zeros(batch + (3,)),
            q=q,
            w=np.zeros(batch + (3,)),
            f=np.full(batch + (4,), params.hover_thrust),
        )

    def copy(self) -> "QuadState":
        return QuadState(self.p.copy(), self.v.copy(), self.q.copy(), self.w.copy(), self.f.copy())

    def index(self, idx) -> "QuadState":
        return QuadState(self.p[idx], self.v[idx], self.q[idx], self.w[idx], self.f[idx])

    def assign(self, idx, other: "QuadState") -> None:
        """In-place overwrite of the batch entries selected by ``idx``."""
        self.p[idx] = other.p
        self.v[idx] = other.v
        self.q[idx] = other.q
        self.w[idx] = other.w
        self.f[idx] = other.f


@dataclass
class FaultConfig:
    """Failure coefficients that take effect at ``t_fault``.

    ``rotor`` is the faulted rotor index (0-3) or -1 for a fault-free run; it
    is bookkeeping for labels and logs, the physics only reads ``k``.
    """

    k: Array = field(default_factory=lambda: np.ones(4))
    t_fault: Array | float = np.inf
    rotor: Array | int = -1

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k, dtype=float)
        if np.any(self.k < 0.0) or np.any(self.k > 1.0):
            raise ValueError("failure coefficients must lie in [0, 1]")

    @classmethod
    def single(cls, rotor: int, k: float, t_fault: float) -> "FaultConfig":
        coeffs = np.ones(4)
        coeffs[rotor] = k
        return cls(k=coeffs, t_fault=t_fault, rotor=rotor)

    @classmethod
    def none(cls) -> "FaultConfig":
        return cls()

    def effective_k(self, t) -> Array:
        active = np.asarray(t) >= np.asarray(self.t_fault)
        return np.where(active[..., None], self.k, 1.0)

    def index(self, idx) -> "FaultConfig":
        t_fault = np.asarray(self.t_fault)
        rotor = np.asarray(self.rotor)
        return FaultConfig(
            k=self.k[idx],
            t_fault=t_fault[idx] if t_fault.ndim else t_fault,
            rotor=rotor[idx] if rotor.ndim else rotor,
        )


# -- quaternion helpers ------------------------------------------------------


def quat_mul(a: Array, b: Array) -> Array:
    """Hamilton product ``a * b`` for (w, x, y, z) quaternions."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_derivative(q: Array, w: Array) -> Array:
    """Attitude kinematics ``q_dot = 0.5 * q * [0, w]`` with ``w`` in body axes."""
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    wx, wy, wz = np.moveaxis(w, -1, 0)
    return 0.5 * np.stack(
        [
            -qx * wx - qy * wy - qz * wz,
            qw * wx + qy * wz - qz * wy,
            qw * wy - qx * wz + qz * wx,
            qw * wz + qx * wy - qy * wx,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: Array) -> Array:
    """Rotation matrix (body -> inertial) of a unit quaternion, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def body_z(q: Array) -> Array:
    """Third column of R(q): the body z axis in inertial coordinates."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)


def rotate(q: Array, v: Array) -> Array:
    """Body -> inertial."""
    return np.einsum("...ij,...j->...i", quat_to_rotmat(q), v)


def rotate_inv(q: Array, v: Array) -> Array:
    """Inertial -> body."""
    return np.einsum("...ji,...j->...i", quat_to_rotmat(q), v)


def quat_from_axis_angle(axis, angle) -> Array:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def normalize_quat(q: Array) -> Array:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# -- model terms -------------------------------------------------------------


def allocation(f: Array, params: QuadParams) -> tuple[Array, Array]:
    """Total thrust and body torque produced by rotor thrusts ``f``."""
    l, km = params.arm, params.k_m
    f1, f2, f3, f4 = np.moveaxis(np.asarray(f, dtype=float), -1, 0)
    F = f1 + f2 + f3 + f4
    tau = np.stack([l * (f2 - f4), l * (f3 - f1), km * (f1 - f2 + f3 - f4)], axis=-1)
    return F, tau


def motor_step(f: Array, u: Array, k: Array, dt: float, params: QuadParams) -> Array:
    """Exact zero-order-hold solution of the first-order rotor lag over ``dt``."""
    target = k * u
    f_next = target + (f - target) * np.exp(-dt / params.tau_motor)
    return np.clip(f_next, 0.0, params.f_max)


def drag(v: Array, w: Array, params: QuadParams) -> tuple[Array, Array]:
    """Linear isotropic drag: force in inertial axes, torque in body axes."""
    return -params.c_d * v, -params.c_r * w


def _derivatives(p, v, q, w, f, params: QuadParams, J: Array):
    F, tau = allocation(f, params)
    F_a, tau_a = drag(v, w, params)
    acc = (body_z(q) * F[..., None] + F_a) / params.mass + params.gravity
    Jw = J * w
    w_dot = (tau - np.cross(w, Jw) + tau_a) / J
    return v, acc, quat_derivative(q, w), w_dot


def step(
    state: QuadState,
    u: Array,
    fault: FaultConfig,
    t: float | Array,
    params: QuadParams,
    dt: float = 0.02,
) -> tuple[QuadState, Array]:
    """Advance one control step under zero-order-hold rotor commands ``u``.

    The rotor thrusts follow their analytic exponential trajectory inside the
    step and the rigid body is integrated with ``N_SUBSTEPS`` classical RK4
    sub-steps that sample that trajectory at the stage times.

    Returns:
        The new state and a boolean ``done`` flag (ground contact or body rate
        above ``params.omega_hard``). ``done`` marks episode termination; the
        returned state is still valid.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, params.f_max)
    k = fault.effective_k(t)
    target = k * u
    J = params.J
    h = dt / N_SUBSTEPS
    tau_m = params.tau_motor

    p, v, q, w = state.p, state.v, state.q, state.w
    f0 = np.clip(state.f, 0.0, params.f_max)
    gap = f0 - target

    def thrust(s):
        return target + gap * np.exp(-s / tau_m)

    for i in range(N_SUBSTEPS):
        s0 = i * h
        fa, fm, fb = thrust(s0), thrust(s0 + 0.5 * h), thrust(s0 + h)
        k1 = _derivatives(p, v, q, w, fa, params, J)
        k2 = _derivatives(p + 0.5 * h * k1[0], v + 0.5 * h * k1[1], q + 0.5 * h * k1[2], w + 0.5 * h * k1[3], fm, params, J)
        k3 = _derivatives(p + 0.5 * h * k2[0], v + 0.5 * h * k2[1], q + 0.5 * h * k2[2], w + 0.5 * h * k2[3], fm, params, J)
        k4 = _derivatives(p + h * k3[0], v + h * k3[1], q + h * k3[2], w + h * k3[3], fb, params, J)
        p = p + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        q = q + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        w = w + h / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        q = normalize_quat(q)

    f = motor_step(f0, u, k, dt, params)
    new = QuadState(p=p, v=v, q=q, w=w, f=f)
    done = (p[..., 2] < 0.0) | (np.linalg.norm(w, axis=-1) > params.omega_hard)
    return new, done


def specific_force(state: QuadState, params: QuadParams) -> Array:
    """Accelerometer reading in body axes: (thrust + drag) / m, gravity excluded."""
    F, _ = allocation(state.f, params)
    F_a, _ = drag(state.v, state.w, params)
    fa_body = rotate_inv(state.q, F_a)
    out = fa_body / params.mass
    out[..., 2] += F / params.mass
    return out


def mechanical_energy(state: QuadState, params: QuadParams) -> Array:
    kinetic = 0.5 * params.mass * np.sum(state.v**2, axis=-1)
    rotational = 0.5 * np.sum(params.J * state.w**2, axis=-1)
    potential = params.mass * params.g * state.p[..., 2]
    return kinetic + rotational + potential


def with_overrides(params: QuadParams, **kw) -> QuadParams:
    return replace(params, **kw)
