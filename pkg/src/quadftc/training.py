"""Hybrid PPO + behavior cloning + selector supervision trainer."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .env import EpisodeConfig, FaultEnv, RewardWeights
from .expert import ExpertGains
from .nn import Adam, save_weights
from .policy import N_ROTORS, ObservationNoise, PolicyOutput, PolicyParams, policy_backward, policy_forward, thrust_to_action
from .sim import Array, QuadParams

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-selector-sup", "no-bc", "no-selector-ctrl")
CURVE_COLUMNS = ["epoch", "steps", "mean_return", "loss_rl", "loss_bc", "loss_sel", "selector_acc", "success", "alpha"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 2_000_000
    n_envs: int = 256
    rollout: int = 128
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 1e-3
    lr_decay: bool = True
    minibatch: int = 4096
    epochs: int = 10
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    selector_weight: float = 1.0
    alpha_rate: float = 0.01
    max_grad_norm: float = 0.5
    init_log_std: float = -2.3
    episode_steps: int = 500
    fault_step: int = 250
    p_des: tuple[float, float, float] = (0.0, 0.0, 3.0)
    fault_free_fraction: float = 0.1
    crash_penalty: float = 20.0
    seed: int = 0
    ablation: str = "none"
    checkpoint_every: int = 20
    reward_scaling: bool = True
    reward_clip: float = 10.0
    float32: bool = True

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        for name in ("total_steps", "n_envs", "rollout", "minibatch", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "p_des" in d:
            d["p_des"] = tuple(d["p_des"])
        return cls(**d)

    @property
    def use_bc(self) -> bool:
        return self.ablation != "no-bc"

    @property
    def single_head(self) -> bool:
        return self.ablation == "no-selector-ctrl"

    @property
    def effective_selector_weight(self) -> float:
        return 0.0 if self.ablation in ("no-selector-sup", "no-selector-ctrl") else self.selector_weight


# -- loss algebra ------------------------------------------------------------


def bc_alpha(t_epoch: int | float, rate: float = 0.01) -> float:
    """Behavior-cloning weight ``exp(-rate * t_epoch)``."""
    if t_epoch < 0:
        raise ValueError("t_epoch must be non-negative")
    return math.exp(-rate * t_epoch)


def combined_loss(l_sel: float, l_rl: float, l_bc: float, selector_weight: float, t_epoch: int, rate: float = 0.01) -> float:
    a = bc_alpha(t_epoch, rate)
    return selector_weight * l_sel + (1.0 - a) * l_rl + a * l_bc


def selector_loss(w_label: Array, w: Array) -> float:
    d = np.asarray(w_label) - np.asarray(w)
    return float(np.mean(np.sum(d * d, axis=-1)))


def bc_loss(u_des: Array, u: Array, f_max: float = 13.0) -> float:
    d = (np.asarray(u_des) - np.asarray(u)) / f_max
    return float(np.mean(np.sum(d * d, axis=-1)))


def gae(rewards: Array, values: Array, dones: Array, last_value: Array, gamma: float, lam: float) -> tuple[Array, Array]:
    """Generalized advantage estimates over a ``(T, N)`` rollout.

    ``dones[t]`` marks that the episode ended after step ``t``; ``last_value``
    bootstraps the state following the final step.
    """
    rewards = np.asarray(rewards, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_value = np.asarray(last_value, dtype=float)
    for t in range(T - 1, -1, -1):
        live = 1.0 - np.asarray(dones[t], dtype=float)
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Minibatch:
    obs: Array
    actions: Array
    old_log_prob: Array
    old_values: Array
    advantages: Array
    returns: Array
    expert_u: Array
    labels: Array


@dataclass
class LossTerms:
    rl: float
    bc: float
    sel: float
    policy: float
    value: float
    entropy: float
    clip_frac: float


def _rl_upstream(params: PolicyParams, out: PolicyOutput, mb: Minibatch, clip: float, value_coef: float, entropy_coef: float):
    """PPO loss and its gradients w.r.t. mixture mean, value and log-std."""
    n = mb.obs.shape[0]
    log_std = params.log_std
    std = np.exp(log_std)
    new_lp = out.log_prob
    ratio = np.exp(new_lp - mb.old_log_prob)
    adv = mb.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    surrogate = np.minimum(unclipped, clipped)
    l_pi = -float(np.mean(surrogate))
    # gradient flows only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    d_lp = np.where(active, -adv * ratio, 0.0) / n

    z = (mb.actions - out.mean) / std
    d_mean = d_lp[:, None] * z / std
    d_log_std = np.sum(d_lp[:, None] * (z * z - 1.0), axis=0)

    v = out.value
    v_clipped = mb.old_values + np.clip(v - mb.old_values, -clip, clip)
    err_a = (v - mb.returns) ** 2
    err_b = (v_clipped - mb.returns) ** 2
    l_v = float(np.mean(np.maximum(err_a, err_b)))
    use_a = err_a >= err_b
    inside = np.abs(v - mb.old_values) < clip
    d_v = np.where(use_a, 2.0 * (v - mb.returns), np.where(inside, 2.0 * (v_clipped - mb.returns), 0.0))
    d_v = value_coef * d_v / n

    entropy = float(np.sum(log_std + 0.5 * np.log(2.0 * np.pi * np.e)))
    d_log_std = d_log_std - entropy_coef * np.ones(N_ROTORS)
    loss = l_pi + value_coef * l_v - entropy_coef * entropy
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return loss, (l_pi, l_v, entropy, clip_frac), d_mean, d_v, d_log_std


def _bc_upstream(params: PolicyParams, out: PolicyOutput, mb: Minibatch):
    n = mb.obs.shape[0]
    # deterministic thrust is (mean + 1) / 2 * f_max, so the normalized gap is:
    diff = mb.expert_u / params.f_max - 0.5 * (out.mean + 1.0)
    loss = float(np.mean(np.sum(diff * diff, axis=-1)))
    return loss, -diff / n


def _sel_upstream(out: PolicyOutput, mb: Minibatch):
    n = mb.obs.shape[0]
    d = mb.labels - out.weights
    return float(np.mean(np.sum(d * d, axis=-1))), -2.0 * d / n


def loss_and_grads(
    params: PolicyParams,
    mb: Minibatch,
    alpha: float,
    selector_weight: float,
    clip: float = 0.2,
    value_coef: float = 0.5,
    entropy_coef: float = 0.005,
) -> tuple[float, LossTerms, list[Array]]:
    """Combined loss ``w * L_sel + (1 - alpha) * L_RL + alpha * L_BC`` and its gradient."""
    out = policy_forward(params, mb.obs, deterministic=True)
    out.log_prob = _log_prob_of(params, out.mean, mb.actions)
    l_rl, (l_pi, l_v, ent, cf), dm_rl, dv_rl, dls_rl = _rl_upstream(params, out, mb, clip, value_coef, entropy_coef)
    l_bc, dm_bc = _bc_upstream(params, out, mb)
    if params.selector is not None:
        l_sel, dw_sel = _sel_upstream(out, mb)
    else:
        l_sel, dw_sel = 0.0, None
    total = selector_weight * l_sel + (1.0 - alpha) * l_rl + alpha * l_bc
    d_mean = (1.0 - alpha) * dm_rl + alpha * dm_bc
    d_w = selector_weight * dw_sel if dw_sel is not None else None
    grads = policy_backward(params, out, d_mean, d_w, (1.0 - alpha) * dv_rl, (1.0 - alpha) * dls_rl)
    terms = LossTerms(l_rl, l_bc, l_sel, l_pi, l_v, ent, cf)
    return total, terms, grads


def component_grads(params: PolicyParams, mb: Minibatch, clip: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.005):
    """Separate gradients of L_sel, L_RL and L_BC (used to check linearity)."""
    out = policy_forward(params, mb.obs, deterministic=True)
    out.log_prob = _log_prob_of(params, out.mean, mb.actions)
    _, _, dm_rl, dv_rl, dls_rl = _rl_upstream(params, out, mb, clip, value_coef, entropy_coef)
    _, dm_bc = _bc_upstream(params, out, mb)
    zero = np.zeros_like(out.mean)
    g_rl = policy_backward(params, out, dm_rl, None, dv_rl, dls_rl)
    g_bc = policy_backward(params, out, dm_bc)
    if params.selector is not None:
        _, dw_sel = _sel_upstream(out, mb)
        g_sel = policy_backward(params, out, zero, dw_sel)
    else:
        g_sel = [np.zeros_like(p) for p in params.params()]
    return g_sel, g_rl, g_bc


def ppo_loss(params: PolicyParams, mb: Minibatch, clip: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.005) -> tuple[float, dict]:
    out = policy_forward(params, mb.obs, deterministic=True)
    out.log_prob = _log_prob_of(params, out.mean, mb.actions)
    loss, (l_pi, l_v, ent, cf), *_ = _rl_upstream(params, out, mb, clip, value_coef, entropy_coef)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite PPO loss (policy {l_pi}, value {l_v})")
    return loss, {"policy": l_pi, "value": l_v, "entropy": ent, "clip_frac": cf}


def _log_prob_of(params: PolicyParams, mean: Array, actions: Array) -> Array:
    from .policy import gaussian_log_prob

    return gaussian_log_prob(actions, mean, params.log_std)


# -- training loop -----------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_return: float
    loss_rl: float
    loss_bc: float
    loss_sel: float
    selector_acc: float
    success: float
    alpha: float

    def row(self) -> list:
        return [getattr(self, c) for c in CURVE_COLUMNS]


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list[EpochStats] = field(default_factory=list)


class RewardScaler:
    """Divides rewards by a slowly forgetting estimate of the discounted-return spread.

    The untrained policy climbs away from the goal and earns rewards several
    orders of magnitude larger than a hovering one; a forgetting average lets
    the scale follow the policy instead of remembering those first epochs.
    """

    def __init__(self, n: int, gamma: float, decay: float = 0.9, clip: float = 10.0):
        self.gamma = gamma
        self.decay = decay
        self.clip = clip
        self.running = np.zeros(n)
        self.var: float | None = None

    def __call__(self, rewards: Array, dones: Array) -> Array:
        returns = np.zeros_like(rewards)
        for t in range(rewards.shape[0]):
            self.running = self.running * self.gamma + rewards[t]
            returns[t] = self.running
            self.running[dones[t]] = 0.0
        var = float(np.var(returns))
        self.var = var if self.var is None else self.decay * self.var + (1.0 - self.decay) * var
        return np.clip(rewards / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


def collect_rollout(env: FaultEnv, params: PolicyParams, horizon: int, rng: np.random.Generator, gamma: float):
    n = env.n
    obs = np.zeros((horizon, n, env.obs.shape[-1]))
    actions = np.zeros((horizon, n, N_ROTORS))
    log_probs = np.zeros((horizon, n))
    values = np.zeros((horizon, n))
    rewards = np.zeros((horizon, n))
    bootstrap = np.zeros((horizon, n))
    dones = np.zeros((horizon, n), dtype=bool)
    expert = np.zeros((horizon, n, N_ROTORS))
    labels = np.zeros((horizon, n, N_ROTORS))
    post_fault = np.zeros((horizon, n), dtype=bool)
    rotors = np.zeros((horizon, n), dtype=int)
    weights = np.zeros((horizon, n, N_ROTORS))
    finished, crashes = [], []
    for t in range(horizon):
        obs[t] = env.obs
        expert[t] = env.expert_u
        labels[t] = env.label
        rotors[t] = np.asarray(env.fault.rotor)
        post_fault[t] = (env.time >= np.asarray(env.fault.t_fault) + 0.5) & (rotors[t] >= 0)
        out = policy_forward(params, env.obs, deterministic=False, rng=rng)
        actions[t] = out.action
        log_probs[t] = out.log_prob
        values[t] = out.value
        weights[t] = out.weights
        info = env.step(out.u)
        if np.any(info.truncated):
            # time-limit ends are not terminal: bootstrap from the last state
            v_final = policy_forward(params, info.final_obs[info.truncated]).value
            bootstrap[t, info.truncated] = gamma * v_final
        rewards[t] = info.reward
        dones[t] = info.done
        finished += list(info.episode_returns[info.done])
        crashes += list(info.crashed[info.done])
    last_value = policy_forward(params, env.obs).value
    return dict(
        obs=obs, actions=actions, log_probs=log_probs, values=values, rewards=rewards,
        bootstrap=bootstrap, dones=dones, expert=expert, labels=labels, last_value=last_value,
        post_fault=post_fault, rotors=rotors, weights=weights,
        finished=np.asarray(finished), crashes=np.asarray(crashes, dtype=bool),
    )


def make_env(cfg: TrainConfig, params: QuadParams, gains: ExpertGains | None = None, weights: RewardWeights | None = None, noise: ObservationNoise | None = None, seed: int | None = None) -> FaultEnv:
    episode = EpisodeConfig(
        p_des=cfg.p_des, episode_steps=cfg.episode_steps, fault_step=cfg.fault_step,
        fault_free_fraction=cfg.fault_free_fraction, crash_penalty=cfg.crash_penalty,
    )
    return FaultEnv(cfg.n_envs, params, seed=cfg.seed if seed is None else seed, episode=episode, weights=weights, gains=gains, noise=noise)


def train(
    cfg: TrainConfig,
    params: QuadParams | None = None,
    out_dir: str | Path | None = None,
    gains: ExpertGains | None = None,
    weights: RewardWeights | None = None,
    noise: ObservationNoise | None = None,
    init: PolicyParams | None = None,
    progress: bool = False,
) -> TrainResult:
    """Run the hybrid trainer; writes ``curve.csv`` and checkpoints when ``out_dir`` is set."""
    params = params or QuadParams()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    act_rng = np.random.default_rng(seeds[1])
    shuffle_rng = np.random.default_rng(seeds[2])

    policy = init.copy() if init is not None else PolicyParams.init(
        init_rng, f_max=params.f_max, single_head=cfg.single_head, init_log_std=cfg.init_log_std
    )
    if cfg.float32:
        policy = policy.astype(np.float32)
    scaler = RewardScaler(cfg.n_envs, cfg.gamma, clip=cfg.reward_clip) if cfg.reward_scaling else None
    env = make_env(cfg, params, gains, weights, noise, seed=int(seeds[0].generate_state(1)[0]))
    flat = policy.params()
    n_actor = len(flat) - len(policy.critic.params()) - 1
    critic_slice = slice(n_actor, len(flat) - 1)
    actor_idx = list(range(n_actor)) + [len(flat) - 1]
    actor_opt = Adam([flat[i] for i in actor_idx], lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    critic_opt = Adam(flat[critic_slice], lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)

    out_path = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        fh = open(out_path / "curve.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)

    sel_w = cfg.effective_selector_weight
    steps_per_epoch = cfg.n_envs * cfg.rollout
    n_epochs = max(1, cfg.total_steps // steps_per_epoch)
    result = TrainResult(policy)
    best_return = -np.inf
    first_return: float | None = None
    collapse_streak = 0
    t_start = time.time()
    for epoch in range(n_epochs):
        alpha = bc_alpha(epoch, cfg.alpha_rate) if cfg.use_bc else 0.0
        lr = cfg.lr * (1.0 - epoch / n_epochs) if cfg.lr_decay else cfg.lr
        actor_opt.lr = critic_opt.lr = lr

        ro = collect_rollout(env, policy, cfg.rollout, act_rng, cfg.gamma)
        rewards = scaler(ro["rewards"], ro["dones"]) if scaler is not None else ro["rewards"]
        rewards = rewards + ro["bootstrap"]
        adv, ret = gae(rewards, ro["values"], ro["dones"], ro["last_value"], cfg.gamma, cfg.lam)
        N = cfg.rollout * cfg.n_envs
        flat_adv = adv.reshape(N)
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
        data = Minibatch(
            obs=ro["obs"].reshape(N, -1),
            actions=ro["actions"].reshape(N, N_ROTORS),
            old_log_prob=ro["log_probs"].reshape(N),
            old_values=ro["values"].reshape(N),
            advantages=flat_adv,
            returns=ret.reshape(N),
            expert_u=ro["expert"].reshape(N, N_ROTORS),
            labels=ro["labels"].reshape(N, N_ROTORS),
        )
        sums = np.zeros(3)
        count = 0
        grad_norm = 0.0
        for _ in range(cfg.epochs):
            order = shuffle_rng.permutation(N)
            for start in range(0, N, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                mb = Minibatch(*(getattr(data, f.name)[idx] for f in fields(Minibatch)))
                total, terms, grads = loss_and_grads(
                    policy, mb, alpha, sel_w, cfg.clip, cfg.value_coef, cfg.entropy_coef
                )
                if not np.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {terms}")
                grad_norm += actor_opt.step([grads[i] for i in actor_idx])
                critic_opt.step(grads[critic_slice])
                np.clip(policy.log_std, -5.0, 1.0, out=policy.log_std)
                sums += (terms.rl, terms.bc, terms.sel)
                count += 1
        sums /= max(count, 1)

        pf = ro["post_fault"]
        if policy.selector is not None and pf.any():
            sel_acc = float(np.mean(np.argmax(ro["weights"][pf], axis=-1) == ro["rotors"][pf]))
        else:
            sel_acc = float("nan")
        mean_ret = float(np.mean(ro["finished"])) if len(ro["finished"]) else float("nan")
        success = float(1.0 - np.mean(ro["crashes"])) if len(ro["crashes"]) else float("nan")
        stats = EpochStats(epoch, (epoch + 1) * steps_per_epoch, mean_ret, sums[0], sums[1], sums[2], sel_acc, success, alpha)
        result.curve.append(stats)
        if writer is not None:
            writer.writerow(stats.row())
            fh.flush()
        if progress:
            log.info(
                "epoch %d steps %d return %.3f rl %.4f bc %.5f sel %.4f acc %.3f ok %.3f alpha %.3f |g| %.3f std %.3f (%.0fs)",
                epoch, stats.steps, mean_ret, sums[0], sums[1], sums[2], sel_acc, success, alpha,
                grad_norm / max(count, 1), float(np.mean(np.exp(policy.log_std))), time.time() - t_start,
            )
        if out_path is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch == n_epochs - 1):
            save_weights(out_path / "policy.ftcw", policy.networks())

        # divergence watchdog: sustained loss of >90% of the improvement gained
        if np.isfinite(mean_ret):
            if first_return is None:
                first_return = mean_ret
            best_return = max(best_return, mean_ret)
            gained = best_return - first_return
            if gained > 0 and mean_ret < best_return - 0.9 * gained - 0.5 * abs(best_return) and epoch > 10:
                collapse_streak += 1
            else:
                collapse_streak = 0
            if collapse_streak >= 10:
                raise TrainingDiverged(f"mean return collapsed to {mean_ret:.3f} from peak {best_return:.3f}")
    if writer is not None:
        fh.close()
    return result
