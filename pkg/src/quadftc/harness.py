"""Closed-loop scenario runner, recovery metrics, batch trials and weight inspection.

All controllers run batched: a scenario with ``B`` lanes advances ``B``
independent vehicles in lockstep. A lane that terminates (ground contact
or gyro limit) is frozen at its last state for the rest of the run.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import DT, EpisodeConfig, RewardWeights, reward, sample_episode_init
from .expert import ExpertGains, expert_from_accel
from .fdd import FddState, controller_coefficients, fdd_update
from .highlevel import PidState, pid_position, policy_command
from .nn import ACTIVATION_NAMES, load_weights
from .policy import N_ROTORS, ObservationNoise, PolicyParams, build_observation, filter_angular_accel, policy_forward
from .sim import Array, FaultConfig, QuadParams, QuadState, quat_from_axis_angle, specific_force, step

CONTROLLERS = ("policy", "expert-ideal", "expert-fdd")


# -- scenario ----------------------------------------------------------------


@dataclass
class Scenario:
    """Single-vehicle recovery experiment.

    ``yaw_rate`` is a piecewise-constant schedule of ``(start_time, rate)``
    pairs for the manual yaw-rate command.
    """

    p_des: tuple[float, float, float] = (1.5, 0.0, 3.0)
    p_init: tuple[float, float, float] | None = None
    yaw_init: float = 0.0
    duration: float = 10.0
    fault_time: float = 5.0
    fault_rotor: int | None = 1
    fault_k: float = 0.0
    yaw_rate: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    init_jitter: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("p_des", "p_init"):
            if d.get(key) is not None:
                d[key] = tuple(float(x) for x in d[key])
        if "yaw_rate" in d:
            d["yaw_rate"] = [tuple(float(x) for x in pair) for pair in d["yaw_rate"]]
        return cls(**d)

    def yaw_rate_at(self, t: float) -> float:
        rate = 0.0
        for start, value in sorted(self.yaw_rate):
            if t >= start:
                rate = value
        return rate

    def initial(self, params: QuadParams, rng: np.random.Generator) -> tuple[QuadState, FaultConfig]:
        p0 = self.p_init if self.p_init is not None else self.p_des
        state = QuadState.hover(params, p=p0, batch=(1,))
        if self.init_jitter > 0:
            state.p = state.p + rng.uniform(-self.init_jitter, self.init_jitter, size=(1, 3))
        state.q = quat_from_axis_angle(np.array([[0.0, 0.0, 1.0]]), np.array([self.yaw_init]))
        if self.fault_rotor is None:
            fault = FaultConfig(k=np.ones((1, 4)), t_fault=np.array([np.inf]), rotor=np.array([-1]))
        else:
            k = np.ones((1, 4))
            k[0, self.fault_rotor] = self.fault_k
            fault = FaultConfig(k=k, t_fault=np.array([self.fault_time]), rotor=np.array([self.fault_rotor]))
        return state, fault


# -- controllers -------------------------------------------------------------


class Controller:
    """Batched controller interface used by :func:`simulate`."""

    name = "controller"

    def reset(self, state: QuadState, fault: FaultConfig) -> None:
        raise NotImplementedError

    def act(self, state: QuadState, t: float, yaw_rate: float) -> tuple[Array, Array, list[str]]:
        """Thrust command, selector weights (NaN when absent) and per-lane mode labels."""
        raise NotImplementedError

    def observe(self, prev: QuadState, new: QuadState, u: Array, t_next: float) -> None:
        pass


class ExpertIdeal(Controller):
    """Privileged expert fed the true failure coefficients (instant switching)."""

    name = "expert-ideal"

    def __init__(self, params: QuadParams, gains: ExpertGains | None = None, pid: PidState | None = None):
        self.params = params
        self.gains = gains or ExpertGains()
        self.pid_template = pid or PidState()

    def reset(self, state: QuadState, fault: FaultConfig) -> None:
        self.fault = fault
        self.pid = self.pid_template.copy()
        self.pid.reset(state.p.shape[:-1])

    def act(self, state, t, yaw_rate):
        a_des = pid_position(state.p, self.p_des, state.v, self.pid, DT)
        k = self.fault.effective_k(np.full(state.p.shape[:-1], t))
        u, _ = expert_from_accel(state, a_des, k, self.params, self.gains, yaw_rate)
        active = np.asarray(t >= np.asarray(self.fault.t_fault)) & (np.asarray(self.fault.rotor) >= 0)
        modes = [f"true({r})" if a else "fault-free" for a, r in zip(np.broadcast_to(active, k.shape[:-1]), np.broadcast_to(self.fault.rotor, k.shape[:-1]))]
        return u, np.full(k.shape, np.nan), modes


class ExpertFdd(Controller):
    """Expert switched by the estimator instead of the true coefficients."""

    name = "expert-fdd"

    def __init__(self, params: QuadParams, gains: ExpertGains | None = None, pid: PidState | None = None, fdd_kw: dict | None = None):
        self.params = params
        self.gains = gains or ExpertGains()
        self.pid_template = pid or PidState()
        self.fdd_kw = fdd_kw or {}

    def reset(self, state, fault):
        n = state.p.shape[0]
        self.fdd = [FddState.start(state.index(i), **self.fdd_kw) for i in range(n)]
        self.pid = self.pid_template.copy()
        self.pid.reset((n,))
        self.dw_filt = np.zeros((n, 3))

    def act(self, state, t, yaw_rate):
        a_des = pid_position(state.p, self.p_des, state.v, self.pid, DT)
        k = np.ones((len(self.fdd), N_ROTORS))
        failed = np.argmin(k, axis=-1)
        for i, f in enumerate(self.fdd):
            k[i], rotor = controller_coefficients(f)
            if rotor is not None:
                failed[i] = rotor
        u, _ = expert_from_accel(state, a_des, k, self.params, self.gains, yaw_rate, failed)
        return u, np.full(k.shape, np.nan), [str(f.mode) for f in self.fdd]

    def observe(self, prev, new, u, t_next):
        self.dw_filt = filter_angular_accel(new.w, prev.w, self.dw_filt, DT)
        acc = specific_force(new, self.params)
        for i, f in enumerate(self.fdd):
            fdd_update(f, u[i], acc[i], self.dw_filt[i], new.index(i), self.params, DT, t=t_next)


class PolicyController(Controller):
    """Learned selector-controller policy, deterministic mean action."""

    name = "policy"

    def __init__(self, policy: PolicyParams, params: QuadParams, pid: PidState | None = None, k_att: float = 6.0, noise: ObservationNoise | None = None, seed: int = 0):
        self.policy = policy
        self.params = params
        self.pid_template = pid or PidState()
        self.k_att = k_att
        self.noise = noise or ObservationNoise.off()
        self.rng = np.random.default_rng(seed)

    def reset(self, state, fault):
        n = state.p.shape[:-1]
        self.pid = self.pid_template.copy()
        self.pid.reset(n)
        self.u_prev = np.full(n + (N_ROTORS,), self.params.hover_thrust)
        self.dw_filt = np.zeros(n + (3,))

    def act(self, state, t, yaw_rate):
        a_des = pid_position(state.p, self.p_des, state.v, self.pid, DT)
        cmd = policy_command(a_des, state.q, yaw_rate, self.k_att, self.params)
        obs = build_observation(
            state, self.u_prev, cmd, self.p_des, specific_force(state, self.params),
            self.dw_filt, self.params.f_max, self.noise, self.rng,
        )
        out = policy_forward(self.policy, obs, deterministic=True, with_value=False)
        modes = ["selector-" + str(int(j)) for j in np.argmax(out.weights, axis=-1)]
        return out.u, out.weights, modes

    def observe(self, prev, new, u, t_next):
        self.dw_filt = filter_angular_accel(new.w, prev.w, self.dw_filt, DT)
        self.u_prev = np.asarray(u, dtype=float)


def make_controller(
    name: str,
    params: QuadParams,
    weights: str | Path | PolicyParams | None = None,
    gains: ExpertGains | None = None,
    pid: PidState | None = None,
) -> Controller:
    if name == "expert-ideal":
        return ExpertIdeal(params, gains, pid)
    if name == "expert-fdd":
        return ExpertFdd(params, gains, pid)
    if name == "policy":
        if weights is None:
            raise FileNotFoundError("the policy controller needs a weight file")
        policy = weights if isinstance(weights, PolicyParams) else load_policy(weights, params.f_max)
        return PolicyController(policy, params, pid)
    raise ValueError(f"unknown controller {name!r}; choose from {CONTROLLERS}")


def load_policy(path: str | Path, f_max: float = 13.0) -> PolicyParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight file not found: {path}")
    return PolicyParams.from_networks(load_weights(path), f_max)


# -- simulation and logs -----------------------------------------------------

LOG_COLUMNS = (
    ["t"] + [f"p{a}" for a in "xyz"] + [f"v{a}" for a in "xyz"] + [f"q{a}" for a in "wxyz"]
    + [f"w{a}" for a in "xyz"] + [f"u{i}" for i in range(4)] + [f"f{i}" for i in range(4)]
    + [f"k{i}" for i in range(4)] + [f"sel{i}" for i in range(4)] + ["reward", "mode"]
)


@dataclass
class TrajectoryLog:
    """Per-step records of one or more lanes; arrays are ``(steps, lanes, ...)``.

    Row ``n`` holds the state at time ``t[n]`` together with the command
    issued from it. A lane that crashed stops logging at its crash step.
    """

    t: Array
    p: Array
    v: Array
    q: Array
    w: Array
    u: Array
    f: Array
    k: Array
    sel: Array
    reward: Array
    mode: list[list[str]]
    crashed: Array
    crash_step: Array
    t_fault: Array
    p_des: Array

    @property
    def steps(self) -> int:
        return len(self.t)

    @property
    def lanes(self) -> int:
        return self.crashed.shape[0]

    def lane(self, i: int) -> "TrajectoryLog":
        n = int(self.crash_step[i]) if self.crashed[i] else self.steps
        return TrajectoryLog(
            self.t[:n], self.p[:n, i : i + 1], self.v[:n, i : i + 1], self.q[:n, i : i + 1],
            self.w[:n, i : i + 1], self.u[:n, i : i + 1], self.f[:n, i : i + 1],
            self.k[:n, i : i + 1], self.sel[:n, i : i + 1], self.reward[:n, i : i + 1],
            [row[i : i + 1] for row in self.mode[:n]], self.crashed[i : i + 1],
            self.crash_step[i : i + 1], self.t_fault[i : i + 1], self.p_des,
        )

    def rows(self, lane: int = 0) -> list[list]:
        single = self.lane(lane) if self.lanes > 1 else self
        out = []
        for n in range(single.steps):
            vals = [single.t[n]]
            for arr in (single.p, single.v, single.q, single.w, single.u, single.f, single.k, single.sel):
                vals += list(arr[n, 0])
            vals += [single.reward[n, 0], single.mode[n][0]]
            out.append(vals)
        return out

    def write_csv(self, path: str | Path, lane: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows(lane):
                writer.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path: str | Path, t_fault: float = np.inf, p_des=(0.0, 0.0, 0.0)) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != LOG_COLUMNS:
                raise ValueError("log header does not match the trajectory format")
            rows = list(reader)
        num = np.array([[float(x) for x in r[:-1]] for r in rows]).reshape(len(rows), len(LOG_COLUMNS) - 1)
        cols = {name: i for i, name in enumerate(LOG_COLUMNS[:-1])}

        def block(prefix, names):
            return num[:, [cols[prefix + a] for a in names]][:, None, :]

        return cls(
            t=num[:, 0], p=block("p", "xyz"), v=block("v", "xyz"), q=block("q", "wxyz"), w=block("w", "xyz"),
            u=block("u", "0123"), f=block("f", "0123"), k=block("k", "0123"), sel=block("sel", "0123"),
            reward=num[:, [cols["reward"]]], mode=[[r[-1]] for r in rows], crashed=np.array([False]),
            crash_step=np.array([len(rows)]), t_fault=np.array([t_fault]), p_des=np.asarray(p_des, dtype=float),
        )


def simulate(
    controller: Controller,
    state: QuadState,
    fault: FaultConfig,
    p_des: Array,
    steps: int,
    params: QuadParams,
    yaw_rate=lambda t: 0.0,
    weights: RewardWeights | None = None,
    k_att: float = 6.0,
) -> TrajectoryLog:
    """Run ``steps`` control steps for every lane of ``state``."""
    p_des = np.asarray(p_des, dtype=float)
    n = state.p.shape[0]
    controller.p_des = p_des
    controller.reset(state, fault)
    state = state.copy()
    alive = np.ones(n, dtype=bool)
    crash_step = np.full(n, steps)
    buf = {name: np.full((steps, n, dim), np.nan) for name, dim in
           (("p", 3), ("v", 3), ("q", 4), ("w", 3), ("u", 4), ("f", 4), ("k", 4), ("sel", 4))}
    rew = np.full((steps, n), np.nan)
    modes: list[list[str]] = []
    u_prev = np.array(state.f)
    score_pid = PidState()
    score_pid.reset((n,))
    for i in range(steps):
        t = i * DT
        rate = yaw_rate(t)
        u, sel, mode = controller.act(state, t, rate)
        u = np.clip(u, 0.0, params.f_max)
        k_now = fault.effective_k(np.full(n, t))
        for name, val in (("p", state.p), ("v", state.v), ("q", state.q), ("w", state.w), ("u", u), ("f", state.f), ("k", k_now), ("sel", sel)):
            buf[name][i, alive] = np.asarray(val)[alive]
        new, done = step(state, u, fault, t, params, DT)
        cmd = policy_command(pid_position(state.p, p_des, state.v, score_pid, DT), state.q, rate, k_att, params)
        r = reward(new, cmd, u, u_prev, k_now, p_des, params, weights)
        rew[i, alive] = r[alive]
        modes.append(list(mode))
        controller.observe(state, new, u, t + DT)
        newly = alive & done
        crash_step[newly] = i + 1
        keep = alive & ~done
        state.assign(np.nonzero(keep)[0], new.index(keep))
        u_prev = np.where(keep[:, None], u, u_prev)
        alive = keep
    return TrajectoryLog(
        t=np.arange(steps) * DT, reward=rew, mode=modes, crashed=crash_step < steps,
        crash_step=crash_step, t_fault=np.broadcast_to(np.asarray(fault.t_fault, dtype=float), (n,)).copy(),
        p_des=p_des, **buf,
    )


def run_scenario(
    scenario: Scenario,
    controller: str | Controller,
    seed: int = 0,
    params: QuadParams | None = None,
    weights: str | Path | PolicyParams | None = None,
    gains: ExpertGains | None = None,
    pid: PidState | None = None,
    log_path: str | Path | None = None,
) -> TrajectoryLog:
    params = params or QuadParams()
    ctrl = controller if isinstance(controller, Controller) else make_controller(controller, params, weights, gains, pid)
    rng = np.random.default_rng(seed)
    state, fault = scenario.initial(params, rng)
    steps = int(round(scenario.duration / DT))
    log = simulate(ctrl, state, fault, scenario.p_des, steps, params, scenario.yaw_rate_at)
    if log_path is not None:
        log.write_csv(log_path)
    return log


# -- metrics -----------------------------------------------------------------


@dataclass
class Metrics:
    max_xy_pos_err: float
    avg_xy_pos_err: float
    avg_xy_vel_err: float
    crashed: bool
    max_yaw_rate: float


def metrics(log: TrajectoryLog, p_des: Array | None = None, t_fault: float | None = None, lane: int = 0) -> Metrics:
    """Table-style x-y errors over the post-fault window of one lane.

    The window starts at ``t_fault`` (defaults to the log's own fault time;
    a run without a fault is scored over its whole length).
    """
    single = log.lane(lane) if log.lanes > 1 else log
    if single.steps == 0:
        raise ValueError("cannot score an empty log")
    p_des = single.p_des if p_des is None else np.asarray(p_des, dtype=float)
    t_f = float(single.t_fault[0]) if t_fault is None else t_fault
    window = single.t >= t_f if np.isfinite(t_f) else np.ones(single.steps, dtype=bool)
    if not np.any(window):
        window = np.ones(single.steps, dtype=bool)
    pos = np.linalg.norm(single.p[window, 0, :2] - p_des[:2], axis=-1)
    vel = np.linalg.norm(single.v[window, 0, :2], axis=-1)
    return Metrics(
        max_xy_pos_err=float(np.max(pos)),
        avg_xy_pos_err=float(np.mean(pos)),
        avg_xy_vel_err=float(np.mean(vel)),
        crashed=bool(single.crashed[0]),
        max_yaw_rate=float(np.max(np.abs(single.w[window, 0, 2]))),
    )


# -- batch evaluation --------------------------------------------------------


@dataclass
class BatchSummary:
    n: int
    controller: str
    success_rate: float
    crash_rate: float
    quantiles: dict[str, dict[str, float]]
    per_trial: dict[str, list]
    altitude: Array = field(repr=False)
    t: Array = field(repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("altitude")
        d.pop("t")
        return d


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def sample_trials(n: int, seed: int, params: QuadParams, severity: float | None = None, rotors: Array | None = None, episode: EpisodeConfig | None = None) -> tuple[QuadState, FaultConfig]:
    """Recovery trials from the training distribution with a fault in every trial."""
    episode = episode or EpisodeConfig(fault_free_fraction=0.0)
    rng = np.random.default_rng(seed)
    state, fault = sample_episode_init(rng, params, episode, n)
    if rotors is not None:
        rotors = np.broadcast_to(np.asarray(rotors), (n,))
        k = np.ones((n, 4))
        k[np.arange(n), rotors] = fault.k[np.arange(n), np.clip(fault.rotor, 0, 3)]
        fault.k, fault.rotor = k, rotors.copy()
        fault.t_fault = np.full(n, episode.fault_step * DT)
    if severity is not None:
        rot = np.asarray(fault.rotor)
        fault.k = np.ones((n, 4))
        fault.k[np.arange(n), rot] = severity
    return state, fault


def batch_eval(
    n: int,
    controller: str | Controller,
    seed: int = 0,
    params: QuadParams | None = None,
    weights: str | Path | PolicyParams | None = None,
    severity: float | None = None,
    episode: EpisodeConfig | None = None,
    settle_window: float = 1.0,
    settle_tol: float = 0.5,
    out_dir: str | Path | None = None,
    gains: ExpertGains | None = None,
) -> BatchSummary:
    """``n`` randomized single-rotor-failure recovery trials.

    A trial succeeds when the vehicle never terminates and its mean 3-D
    position error over the final ``settle_window`` seconds is below
    ``settle_tol``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    params = params or QuadParams()
    episode = episode or EpisodeConfig(fault_free_fraction=0.0)
    ctrl = controller if isinstance(controller, Controller) else make_controller(controller, params, weights, gains)
    state, fault = sample_trials(n, seed, params, severity, episode=episode)
    p_des = np.asarray(episode.p_des, dtype=float)
    log = simulate(ctrl, state, fault, p_des, episode.episode_steps, params)
    tail = log.t >= log.t[-1] + DT - settle_window - 1e-9
    tail_err = np.linalg.norm(log.p[tail] - p_des, axis=-1)
    # crashed lanes have no samples at the end of the run; they fail regardless
    final_err = np.full(n, np.inf)
    has_tail = ~np.all(np.isnan(tail_err), axis=0)
    final_err[has_tail] = np.nanmean(tail_err[:, has_tail], axis=0)
    success = ~log.crashed & (final_err < settle_tol)
    per = [metrics(log, p_des, lane=i) for i in range(n)]
    per_trial = {
        "max_xy_pos_err": [m.max_xy_pos_err for m in per],
        "avg_xy_pos_err": [m.avg_xy_pos_err for m in per],
        "avg_xy_vel_err": [m.avg_xy_vel_err for m in per],
        "max_yaw_rate": [m.max_yaw_rate for m in per],
        "final_pos_err": [float(e) for e in final_err],
        "crashed": [bool(c) for c in log.crashed],
        "success": [bool(s) for s in success],
        "rotor": [int(r) for r in np.asarray(fault.rotor)],
        "severity": [float(fault.k[i, fault.rotor[i]]) for i in range(n)],
    }
    quantiles = {
        key: {f"q{int(100 * q):02d}": float(np.quantile(per_trial[key], q)) for q in QUANTILES}
        for key in ("max_xy_pos_err", "avg_xy_pos_err", "avg_xy_vel_err", "max_yaw_rate", "final_pos_err")
    }
    summary = BatchSummary(
        n=n, controller=ctrl.name, success_rate=float(np.mean(success)), crash_rate=float(np.mean(log.crashed)),
        quantiles=quantiles, per_trial=per_trial, altitude=log.p[..., 2], t=log.t,
    )
    if out_dir is not None:
        write_batch(summary, out_dir)
    return summary


def write_batch(summary: BatchSummary, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2))
    with open(out / "altitude.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"trial{i}" for i in range(summary.n)])
        for i, t in enumerate(summary.t):
            writer.writerow([repr(float(t))] + ["" if np.isnan(z) else repr(float(z)) for z in summary.altitude[i]])


# -- ablations and inspection ------------------------------------------------


def ablation_suite(base, seeds=(0, 1, 2), ablations=None, out_dir: str | Path | None = None, params: QuadParams | None = None, progress: bool = False) -> dict[str, list]:
    """Train every ablation for each seed with otherwise identical settings.

    Returns ``{ablation: [curve per seed]}``; with ``out_dir`` each run writes
    ``<out_dir>/<ablation>/seed<k>/curve.csv`` and weights.
    """
    from dataclasses import replace

    from .training import ABLATIONS, train

    ablations = ablations or ABLATIONS
    curves: dict[str, list] = {}
    for name in ablations:
        curves[name] = []
        for s in seeds:
            cfg = replace(base, ablation=name, seed=s)
            run_dir = Path(out_dir) / name / f"seed{s}" if out_dir is not None else None
            result = train(cfg, params=params, out_dir=run_dir, progress=progress)
            curves[name].append(result.curve)
    return curves


def inspect_weights(path: str | Path) -> str:
    """Readable summary of a weight file (validates it on the way)."""
    nets = load_weights(path)
    if len(nets) == N_ROTORS + 3:
        names = ["selector"] + [f"controller{i}" for i in range(N_ROTORS)] + ["critic", "log_std"]
    elif len(nets) == 3:
        names = ["controller", "critic", "log_std"]
    else:
        names = [f"net{i}" for i in range(len(nets))]
    lines = [f"{Path(path).name}: {len(nets)} networks"]
    for name, net in zip(names, nets):
        total = net.param_count()
        if name == "log_std":
            lines.append(f"  {name}: values {np.round(net.layers[0].b, 4).tolist()}")
            continue
        lines.append(f"  {name}: widths {'/'.join(str(w) for w in net.widths)}  params {total}")
        for j, layer in enumerate(net.layers):
            lines.append(
                f"    layer {j}: W {layer.W.shape[0]}x{layer.W.shape[1]} |W| {np.linalg.norm(layer.W):.4f} "
                f"|b| {np.linalg.norm(layer.b):.4f} act {ACTIVATION_NAMES[layer.act]}"
            )
    return "\n".join(lines)
