"""Vectorized hover-and-recover environment used for training and evaluation.

Each of ``n`` vehicles starts fault-free near the goal, receives a single
rotor fault of random severity at step 250 (10% of episodes stay healthy)
and runs for 500 steps. The environment owns the position loop, the angular
acceleration filter and the previous command, builds observations, computes
the privileged expert's action on every state and scores the transition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expert import ExpertGains, expert_from_accel, yaw_controllable
from .highlevel import Command, PidState, pid_position, policy_command
from .policy import ObservationNoise, build_observation, fault_label, filter_angular_accel
from .sim import Array, FaultConfig, QuadParams, QuadState, quat_from_axis_angle, quat_mul, specific_force, step

DT = 0.02


@dataclass
class RewardWeights:
    position: float = 0.1
    velocity: float = 0.01
    angular: float = 0.02
    oscillation: float = 0.0008
    accel: float = 0.2
    spin_cap: float = 25.0

    def __post_init__(self) -> None:
        if min(self.position, self.velocity, self.angular, self.oscillation, self.accel, self.spin_cap) < 0:
            raise ValueError("reward weights must be non-negative")


def reward(
    state: QuadState,
    cmd: Command,
    u: Array,
    u_prev: Array,
    k: Array,
    p_des: Array,
    params: QuadParams,
    weights: RewardWeights | None = None,
) -> Array:
    """Weighted sum of the five tracking penalties (always <= 0).

    With yaw controllable (``min k > 0.5``) the full body-rate error is
    penalized; otherwise only the tilt rates plus any yaw rate above the spin
    cap.
    """
    wt = weights or RewardWeights()
    pos = np.sum((state.p - p_des) ** 2, axis=-1)
    vel = np.sum(state.v**2, axis=-1)
    rate_err = state.w - cmd.w_des
    full = np.sum(rate_err**2, axis=-1)
    excess = np.abs(state.w[..., 2]) - wt.spin_cap
    tilt_only = rate_err[..., 0] ** 2 + rate_err[..., 1] ** 2 + np.where(excess > 0, excess, 0.0) ** 2
    ang = np.where(yaw_controllable(k), full, tilt_only)
    osc = np.sum((np.asarray(u) - u_prev) ** 2, axis=-1)
    az = specific_force(state, params)[..., 2]
    acc = (az - cmd.az_des) ** 2
    return -(wt.position * pos + wt.velocity * vel + wt.angular * ang + wt.oscillation * osc + wt.accel * acc)


@dataclass
class EpisodeConfig:
    p_des: tuple[float, float, float] = (0.0, 0.0, 3.0)
    episode_steps: int = 500
    fault_step: int = 250
    cube: float = 1.0
    max_tilt_deg: float = 10.0
    fault_free_fraction: float = 0.1
    crash_penalty: float = 20.0


def sample_episode_init(
    rng: np.random.Generator, params: QuadParams, cfg: EpisodeConfig | None = None, n: int = 1, dt: float = DT
) -> tuple[QuadState, FaultConfig]:
    """Random initial hover states and single-rotor fault schedules for ``n`` episodes."""
    cfg = cfg or EpisodeConfig()
    state = QuadState.hover(params, p=cfg.p_des, batch=(n,))
    state.p = np.asarray(cfg.p_des) + rng.uniform(-0.5 * cfg.cube, 0.5 * cfg.cube, size=(n, 3))
    axis = rng.standard_normal((n, 3))
    axis[:, 2] = 0.0
    axis[np.linalg.norm(axis, axis=1) < 1e-9] = (1.0, 0.0, 0.0)
    # uniform tilt direction, tilt angle uniform in [0, max]
    tilt = rng.uniform(0.0, np.radians(cfg.max_tilt_deg), size=n)
    yaw = rng.uniform(-np.pi, np.pi, size=n)
    q_yaw = quat_from_axis_angle(np.tile([0.0, 0.0, 1.0], (n, 1)), yaw)
    state.q = quat_mul(quat_from_axis_angle(axis, tilt), q_yaw)

    rotor = rng.integers(0, 4, size=n)
    severity = rng.uniform(0.0, 1.0, size=n)
    healthy = rng.uniform(size=n) < cfg.fault_free_fraction
    k = np.ones((n, 4))
    k[np.arange(n), rotor] = severity
    k[healthy] = 1.0
    rotor = np.where(healthy, -1, rotor)
    t_fault = np.where(healthy, np.inf, cfg.fault_step * dt)
    return state, FaultConfig(k=k, t_fault=t_fault, rotor=rotor)


@dataclass
class StepInfo:
    reward: Array
    done: Array
    crashed: Array
    truncated: Array
    final_obs: Array
    episode_returns: Array
    finished: Array


class FaultEnv:
    """``n`` independent vehicles with automatic reset at episode end."""

    def __init__(
        self,
        n: int,
        params: QuadParams,
        seed: int = 0,
        episode: EpisodeConfig | None = None,
        weights: RewardWeights | None = None,
        gains: ExpertGains | None = None,
        pid_template: PidState | None = None,
        noise: ObservationNoise | None = None,
        k_att: float = 6.0,
    ):
        self.n = n
        self.params = params
        self.episode = episode or EpisodeConfig()
        self.weights = weights or RewardWeights()
        self.gains = gains or ExpertGains()
        self.pid_template = pid_template or PidState()
        self.noise = noise if noise is not None else ObservationNoise()
        self.k_att = k_att
        seeds = np.random.SeedSequence(seed).spawn(2)
        self.init_rng = np.random.default_rng(seeds[0])
        self.noise_rng = np.random.default_rng(seeds[1])
        self.p_des = np.asarray(self.episode.p_des, dtype=float)

        self.state, self.fault = sample_episode_init(self.init_rng, params, self.episode, n)
        self.pid = self.pid_template.copy()
        self.pid.reset((n,))
        self.steps = np.zeros(n, dtype=int)
        self.u_prev = np.full((n, 4), params.hover_thrust)
        self.w_prev = self.state.w.copy()
        self.dw_filt = np.zeros((n, 3))
        self.returns = np.zeros(n)
        self._prepare()

    # observation, command and expert label for the current state
    def _prepare(self) -> None:
        a_des = pid_position(self.state.p, self.p_des, self.state.v, self.pid, DT)
        self.cmd = policy_command(a_des, self.state.q, 0.0, self.k_att, self.params)
        t = self.steps * DT
        self.k_now = self.fault.effective_k(t)
        self.expert_u, _ = expert_from_accel(self.state, a_des, self.k_now, self.params, self.gains)
        self.label = fault_label(self.fault, t)
        self.obs = build_observation(
            self.state, self.u_prev, self.cmd, self.p_des,
            specific_force(self.state, self.params), self.dw_filt,
            self.params.f_max, self.noise, self.noise_rng,
        )

    @property
    def time(self) -> Array:
        return self.steps * DT

    def step(self, u: Array) -> StepInfo:
        u = np.clip(np.asarray(u, dtype=float), 0.0, self.params.f_max)
        t = self.steps * DT
        new, crashed = step(self.state, u, self.fault, t, self.params, DT)
        r = reward(new, self.cmd, u, self.u_prev, self.k_now, self.p_des, self.params, self.weights)
        r = np.where(crashed, r - self.episode.crash_penalty, r)
        self.dw_filt = filter_angular_accel(new.w, self.state.w, self.dw_filt, DT)
        self.state = new
        self.u_prev = u
        self.steps = self.steps + 1
        self.returns = self.returns + r
        truncated = (self.steps >= self.episode.episode_steps) & ~crashed
        done = crashed | truncated

        finished_returns = self.returns.copy()
        integral_before = self.pid.integral.copy()
        self._prepare()
        # observation of the last state before reset, for bootstrapping truncations
        final_obs = self.obs.copy()
        if np.any(done):
            self._reset(done)
            # replay the position-loop update of the surviving vehicles
            self.pid.integral[~done] = integral_before[~done]
            self._prepare()
        return StepInfo(r, done, crashed, truncated, final_obs, finished_returns, done)

    def _reset(self, mask: Array) -> None:
        idx = np.nonzero(mask)[0]
        s, f = sample_episode_init(self.init_rng, self.params, self.episode, len(idx))
        self.state.assign(idx, s)
        self.fault.k[idx] = f.k
        self.fault.t_fault = np.asarray(self.fault.t_fault, dtype=float).copy()
        self.fault.t_fault[idx] = f.t_fault
        self.fault.rotor = np.asarray(self.fault.rotor).copy()
        self.fault.rotor[idx] = f.rotor
        self.pid.integral[idx] = 0.0
        self.steps[idx] = 0
        self.u_prev[idx] = self.params.hover_thrust
        self.dw_filt[idx] = 0.0
        self.returns[idx] = 0.0
