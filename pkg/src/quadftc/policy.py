"""Selector-Controller policy: observation layout, mixture of heads, sampling.

Observation (27 values, in this order, each block divided by its scale)::

    p - p_des   3   1 m
    v           3   5 m/s
    q (w,x,y,z) 4   1
    w           3   20 rad/s
    u_prev      4   f_max
    w_des       3   20 rad/s
    az_des      1   20 m/s^2
    a_imu       3   20 m/s^2   (body specific force)
    dw_filt     3   200 rad/s^2
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .highlevel import Command
from .nn import IDENTITY, SOFTMAX, TANH, Layer, Mlp
from .sim import Array, FaultConfig, QuadState

OBS_DIM = 27
N_ROTORS = 4
FILTER_BETA = 0.6
LOG_STD_BOUNDS = (-5.0, 1.0)

SCALES = {
    "pos": 1.0,
    "vel": 5.0,
    "quat": 1.0,
    "rate": 20.0,
    "thrust": None,  # f_max
    "rate_des": 20.0,
    "az_des": 20.0,
    "accel": 20.0,
    "ang_accel": 200.0,
}

OBS_SLICES = {
    "pos": slice(0, 3),
    "vel": slice(3, 6),
    "quat": slice(6, 10),
    "rate": slice(10, 13),
    "u_prev": slice(13, 17),
    "rate_des": slice(17, 20),
    "az_des": slice(20, 21),
    "accel": slice(21, 24),
    "ang_accel": slice(24, 27),
}


@dataclass
class ObservationNoise:
    accel_std: float = 0.2
    gyro_std: float = 0.01

    @classmethod
    def off(cls) -> "ObservationNoise":
        return cls(0.0, 0.0)


def filter_angular_accel(w_now: Array, w_prev: Array, prev_filtered: Array, dt: float, beta: float = FILTER_BETA) -> Array:
    """Finite-difference angular acceleration through a one-pole low-pass."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    raw = (np.asarray(w_now) - np.asarray(w_prev)) / dt
    return beta * np.asarray(prev_filtered) + (1.0 - beta) * raw


def build_observation(
    state: QuadState,
    u_prev: Array,
    cmd: Command,
    p_des: Array,
    imu_accel: Array,
    dw_filt: Array,
    f_max: float,
    noise: ObservationNoise | None = None,
    rng: np.random.Generator | None = None,
) -> Array:
    w = np.asarray(state.w, dtype=float)
    acc = np.asarray(imu_accel, dtype=float)
    if noise is not None and (noise.gyro_std > 0 or noise.accel_std > 0):
        if rng is None:
            raise ValueError("observation noise needs a random generator")
        w = w + noise.gyro_std * rng.standard_normal(w.shape)
        acc = acc + noise.accel_std * rng.standard_normal(acc.shape)
    az = np.asarray(cmd.az_des, dtype=float)[..., None]
    parts = [
        (np.asarray(state.p) - p_des) / SCALES["pos"],
        np.asarray(state.v) / SCALES["vel"],
        np.asarray(state.q),
        w / SCALES["rate"],
        np.asarray(u_prev) / f_max,
        np.asarray(cmd.w_des) / SCALES["rate_des"],
        az / SCALES["az_des"],
        acc / SCALES["accel"],
        np.asarray(dw_filt) / SCALES["ang_accel"],
    ]
    batch = np.broadcast_shapes(*(x.shape[:-1] for x in parts))
    obs = np.concatenate([np.broadcast_to(x, batch + x.shape[-1:]) for x in parts], axis=-1)
    assert obs.shape[-1] == OBS_DIM
    return obs


def fault_label(fault: FaultConfig, t: float | Array) -> Array:
    """Uniform weights before the fault (or without one), one-hot after.

    Without an explicit ``fault.rotor`` the weakest rotor with ``k < 1`` is
    taken as the faulted one.
    """
    k = np.asarray(fault.k)
    inferred = np.where(np.min(k, axis=-1) < 1.0, np.argmin(k, axis=-1), -1)
    rotor = np.asarray(fault.rotor)
    rotor = np.where(rotor >= 0, rotor, inferred)
    t = np.asarray(t, dtype=float)
    active = (t >= np.asarray(fault.t_fault)) & (rotor >= 0)
    batch = np.broadcast_shapes(rotor.shape, t.shape, np.shape(fault.t_fault))
    active = np.broadcast_to(active, batch)
    rotor = np.broadcast_to(rotor, batch)
    label = np.full(batch + (N_ROTORS,), 1.0 / N_ROTORS)
    onehot = np.eye(N_ROTORS)[np.clip(rotor, 0, N_ROTORS - 1)]
    return np.where(active[..., None], onehot, label)


# -- policy parameters -------------------------------------------------------


@dataclass
class PolicyParams:
    """Selector + four controller heads (or one plain head) + critic + log-std.

    ``selector is None`` marks the single-network ablation, whose only head
    has roughly the parameter count of selector and controllers together.
    """

    controllers: list[Mlp]
    critic: Mlp
    log_std: Array
    selector: Mlp | None = None
    f_max: float = 13.0

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        hidden: int = 64,
        critic_hidden: int = 128,
        f_max: float = 13.0,
        single_head: bool = False,
        init_log_std: float = -2.3,
    ) -> "PolicyParams":
        if single_head:
            h = matched_single_width(hidden)
            controllers = [Mlp.init([OBS_DIM, h, h, N_ROTORS], TANH, rng, final_scale=0.01)]
            selector = None
        else:
            selector = Mlp.init([OBS_DIM, hidden, hidden, N_ROTORS], SOFTMAX, rng)
            controllers = [Mlp.init([OBS_DIM, hidden, hidden, N_ROTORS], TANH, rng, final_scale=0.01) for _ in range(N_ROTORS)]
        critic = Mlp.init([OBS_DIM, critic_hidden, critic_hidden, 1], IDENTITY, rng)
        return cls(controllers, critic, np.full(N_ROTORS, init_log_std), selector, f_max)

    @property
    def single_head(self) -> bool:
        return self.selector is None

    def actor_nets(self) -> list[Mlp]:
        return ([self.selector] if self.selector is not None else []) + self.controllers

    def networks(self) -> list[Mlp]:
        """File order: selector, controllers, critic, log-std as a bias-only layer."""
        log_std = Mlp([Layer(np.zeros((N_ROTORS, 0)), self.log_std, IDENTITY)])
        return self.actor_nets() + [self.critic, log_std]

    @classmethod
    def from_networks(cls, nets: list[Mlp], f_max: float = 13.0) -> "PolicyParams":
        if len(nets) == N_ROTORS + 3:
            selector, controllers, critic, log_std = nets[0], nets[1 : 1 + N_ROTORS], nets[-2], nets[-1]
        elif len(nets) == 3:
            selector, controllers, critic, log_std = None, [nets[0]], nets[1], nets[2]
        else:
            from .nn import ShapeMismatchError

            raise ShapeMismatchError(f"expected 3 or {N_ROTORS + 3} networks, found {len(nets)}")
        return cls(controllers, critic, log_std.layers[0].b.copy(), selector, f_max)

    def params(self) -> list[Array]:
        """Flat parameter list; the optimizer and gradients use this order."""
        out: list[Array] = []
        for net in self.actor_nets():
            out += net.params()
        out += self.critic.params()
        out.append(self.log_std)
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            [c.copy() for c in self.controllers],
            self.critic.copy(),
            self.log_std.copy(),
            self.selector.copy() if self.selector is not None else None,
            self.f_max,
        )

    def astype(self, dtype: type) -> "PolicyParams":
        """Copy with network arithmetic in ``dtype``; the log-std stays float64."""
        return PolicyParams(
            [c.astype(dtype) for c in self.controllers],
            self.critic.astype(dtype),
            self.log_std.copy(),
            self.selector.astype(dtype) if self.selector is not None else None,
            self.f_max,
        )

    def actor_param_count(self) -> int:
        return sum(net.param_count() for net in self.actor_nets())


def matched_single_width(hidden: int = 64) -> int:
    """Hidden width of a 27-h-h-4 net closest in size to selector + 4 heads."""
    per_head = OBS_DIM * hidden + hidden + hidden * hidden + hidden + hidden * N_ROTORS + N_ROTORS
    target = (N_ROTORS + 1) * per_head
    # h^2 + (OBS_DIM + N_ROTORS + 2) h + N_ROTORS = target
    b = OBS_DIM + N_ROTORS + 2
    return int(round((-b + np.sqrt(b * b + 4 * (target - N_ROTORS))) / 2))


# -- forward / backward ------------------------------------------------------


@dataclass
class PolicyOutput:
    u: Array
    weights: Array
    log_prob: Array
    value: Array
    mean: Array
    action: Array
    cache: dict = field(default_factory=dict, repr=False)


class NonFiniteOutputError(FloatingPointError):
    pass


def gaussian_log_prob(action: Array, mean: Array, log_std: Array) -> Array:
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def action_to_thrust(action: Array, f_max: float) -> Array:
    return 0.5 * (np.clip(action, -1.0, 1.0) + 1.0) * f_max


def thrust_to_action(u: Array, f_max: float) -> Array:
    return 2.0 * np.asarray(u) / f_max - 1.0


def policy_forward(
    params: PolicyParams,
    x: Array,
    deterministic: bool = True,
    rng: np.random.Generator | None = None,
    with_value: bool = True,
) -> PolicyOutput:
    """Mixture mean ``sum_j w_j * head_j(x)``, optional Gaussian sample, critic value."""
    x = np.asarray(x, dtype=float)
    heads = []
    head_caches = []
    for net in params.controllers:
        y, c = net.forward(x)
        heads.append(y)
        head_caches.append(c)
    if params.selector is not None:
        w, sel_cache = params.selector.forward(x)
        stacked = np.stack(heads, axis=-2)
        mean = np.einsum("...j,...jk->...k", w, stacked)
    else:
        w, sel_cache = np.full(x.shape[:-1] + (N_ROTORS,), 1.0 / N_ROTORS), None
        stacked = None
        mean = heads[0]
    if deterministic:
        action = mean
    else:
        if rng is None:
            raise ValueError("stochastic sampling needs a random generator")
        action = mean + np.exp(params.log_std) * rng.standard_normal(mean.shape)
    log_prob = gaussian_log_prob(action, mean, params.log_std)
    value = np.zeros(x.shape[:-1])
    critic_cache = None
    if with_value:
        v, critic_cache = params.critic.forward(x)
        value = v[..., 0]
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(value))):
        raise NonFiniteOutputError("policy produced non-finite output")
    return PolicyOutput(
        u=action_to_thrust(action, params.f_max),
        weights=w,
        log_prob=log_prob,
        value=value,
        mean=mean,
        action=action,
        cache={"heads": head_caches, "stacked": stacked, "selector": sel_cache, "critic": critic_cache},
    )


def policy_backward(
    params: PolicyParams,
    out: PolicyOutput,
    d_mean: Array,
    d_weights: Array | None = None,
    d_value: Array | None = None,
    d_log_std: Array | None = None,
) -> list[Array]:
    """Gradient list (ordered like ``params.params()``) of a scalar loss.

    The loss reaches the network through the mixture mean, the selector
    weights directly (supervision), the critic value and the log-std.
    """
    grads: list[Array] = []
    d_mean = np.asarray(d_mean, dtype=float)
    if params.selector is not None:
        w = out.weights
        dw = np.einsum("...k,...jk->...j", d_mean, out.cache["stacked"])
        if d_weights is not None:
            dw = dw + d_weights
        g_sel, _ = params.selector.backward(out.cache["selector"], dw)
        grads += g_sel
        for j, net in enumerate(params.controllers):
            g, _ = net.backward(out.cache["heads"][j], d_mean * w[..., j : j + 1])
            grads += g
    else:
        g, _ = params.controllers[0].backward(out.cache["heads"][0], d_mean)
        grads += g
    if d_value is not None:
        g, _ = params.critic.backward(out.cache["critic"], np.asarray(d_value)[..., None])
    else:
        g = [np.zeros_like(p) for p in params.critic.params()]
    grads += g
    grads.append(np.zeros(N_ROTORS) if d_log_std is None else np.asarray(d_log_std, dtype=float))
    return grads
