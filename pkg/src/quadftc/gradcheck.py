"""Finite-difference verification of the analytic network gradients.

Each probe draws a random input batch, random output weights ``c`` for the
scalar test loss and a random direction ``d`` in parameter space, then
compares ``grad . d`` with the central difference of the loss along ``d``.
Directional derivatives stay O(1) in size, so their relative error is a
meaningful statistic even where individual gradient entries vanish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import IDENTITY, SOFTMAX, TANH, Mlp
from .policy import OBS_DIM, PolicyParams, gaussian_log_prob, policy_backward, policy_forward


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    probes: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def passed(self, tol: float = 1e-5) -> bool:
        return self.worst < tol


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _directional(params: list[np.ndarray], grads: list[np.ndarray], loss, rng: np.random.Generator, h: float) -> float:
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = float(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
    originals = [p.copy() for p in params]
    for p, d in zip(params, dirs):
        p += h * d
    up = loss()
    for p, o, d in zip(params, originals, dirs):
        p[...] = o - h * d
    down = loss()
    for p, o in zip(params, originals):
        p[...] = o
    return _rel(analytic, (up - down) / (2.0 * h))


def check_mlp(widths: list[int], out_act: int, rng: np.random.Generator, batch: int = 8, h: float = 1e-5) -> float:
    net = Mlp.init(widths, out_act, rng)
    for layer in net.layers:
        layer.b[:] = 0.1 * rng.standard_normal(layer.b.shape)
    x = rng.standard_normal((batch, widths[0]))
    c = rng.standard_normal((batch, widths[-1]))

    def loss() -> float:
        return float(np.sum(c * net(x)))

    _, cache = net.forward(x)
    grads, _ = net.backward(cache, c)
    return _directional(net.params(), grads, loss, rng, h)


def check_policy(rng: np.random.Generator, batch: int = 8, h: float = 1e-5, single_head: bool = False) -> float:
    """Full policy: mixture, squash to thrust, Gaussian log-density and critic."""
    policy = PolicyParams.init(rng, single_head=single_head)
    for head in policy.controllers:
        # undo the small output initialization so the heads are far from linear
        head.layers[-1].W *= 30.0
    for net in policy.actor_nets() + [policy.critic]:
        for layer in net.layers:
            layer.b[:] = 0.1 * rng.standard_normal(layer.b.shape)
    policy.log_std[:] = rng.uniform(-1.0, 0.0, 4)
    x = rng.standard_normal((batch, OBS_DIM))
    c_u = rng.standard_normal((batch, 4))
    c_lp = rng.standard_normal(batch)
    c_v = rng.standard_normal(batch)
    action = rng.uniform(-0.9, 0.9, (batch, 4))

    def loss() -> float:
        out = policy_forward(policy, x)
        lp = gaussian_log_prob(action, out.mean, policy.log_std)
        return float(np.sum(c_u * out.u) + np.sum(c_lp * lp) + np.sum(c_v * out.value))

    out = policy_forward(policy, x)
    std = np.exp(policy.log_std)
    z = (action - out.mean) / std
    # u = (m + 1) f_max / 2 while |m| < 1 (the tanh heads keep it there)
    d_mean = c_u * policy.f_max / 2.0 + c_lp[:, None] * z / std
    d_log_std = np.sum(c_lp[:, None] * (z * z - 1.0), axis=0)
    grads = policy_backward(policy, out, d_mean, None, c_v, d_log_std)
    return _directional(policy.params(), grads, loss, rng, h)


def run_gradcheck(probes: int = 100, seed: int = 0) -> GradCheckReport:
    """Worst relative error per component over ``probes`` random probes each."""
    rng = np.random.default_rng(seed)
    checks = {
        "selector": lambda: check_mlp([OBS_DIM, 64, 64, 4], SOFTMAX, rng),
        "controller": lambda: check_mlp([OBS_DIM, 64, 64, 4], TANH, rng),
        "critic": lambda: check_mlp([OBS_DIM, 128, 128, 1], IDENTITY, rng),
        "policy": lambda: check_policy(rng),
        "policy-single-head": lambda: check_policy(rng, single_head=True),
    }
    worst = {name: max(fn() for _ in range(probes)) for name, fn in checks.items()}
    return GradCheckReport(worst, probes)
