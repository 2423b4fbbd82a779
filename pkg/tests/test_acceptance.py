"""Acceptance criteria 1-10, each at its stated tolerance.

Every test appends one ``criterion N: PASS|FAIL ...`` line to the terminal
summary. Criteria 6-8 and 10 score the stored training artifacts in
``artifacts/`` (produced by ``quadftc train`` and ``quadftc ablate`` with the
configs in ``configs/``); regenerate them with the commands in the README.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from quadftc.env import EpisodeConfig
from quadftc.fdd import N_ROTORS
from quadftc.gradcheck import run_gradcheck
from quadftc.harness import Scenario, batch_eval, load_policy, make_controller, metrics, run_scenario, sample_trials, simulate
from quadftc.nn import BadMagicError, TruncatedFileError, VersionMismatchError, load_weights, save_weights
from quadftc.policy import OBS_DIM, PolicyParams, gaussian_log_prob, policy_forward
from quadftc.sim import FaultConfig, QuadParams, QuadState, step, with_overrides
from quadftc.training import Minibatch, bc_alpha, component_grads, loss_and_grads, selector_loss

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"
MAIN_RUN = ARTIFACTS / "main"
ABLATION_RUN = ARTIFACTS / "ablation"
P_DES = np.array([0.0, 0.0, 3.0])


def _record(report, n: int, ok: bool, detail: str) -> None:
    report.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _tilt_deg(q: np.ndarray) -> np.ndarray:
    up = 1.0 - 2.0 * (q[..., 1] ** 2 + q[..., 2] ** 2)
    return np.degrees(np.arccos(np.clip(up, -1.0, 1.0)))


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_dynamics_fidelity(criterion_report):
    params = with_overrides(QuadParams(), c_d=0.0, c_r=0.0)
    state = QuadState.hover(params)
    drift = 0.0
    for i in range(100):
        new, _ = step(state, np.full(4, params.hover_thrust), FaultConfig(), i * 0.02, params)
        drift = max(drift, *(float(np.max(np.abs(a - b))) for a, b in ((new.p, state.p), (new.v, state.v), (new.q, state.q), (new.w, state.w))))
        state = new

    fall = QuadState.hover(params, p=(0, 0, 100.0))
    fall.f = np.zeros(4)
    fall_err = 0.0
    for i in range(50):
        fall, _ = step(fall, np.zeros(4), FaultConfig(), i * 0.02, params)
        t = (i + 1) * 0.02
        fall_err = max(fall_err, abs(fall.p[2] - (100.0 - 0.5 * params.g * t * t)), abs(fall.v[2] + params.g * t))

    spin = QuadState.hover(params, p=(0, 0, 1e4))
    spin.w = np.array([0.0, 0.0, 7.0])
    spin.f = np.zeros(4)
    for i in range(500):
        spin, _ = step(spin, np.zeros(4), FaultConfig(), i * 0.02, params)
    spin_err = abs(np.linalg.norm(spin.w) - 7.0)

    ok = drift < 1e-9 and fall_err < 1e-9 and spin_err < 1e-8
    _record(criterion_report, 1, ok, f"hover drift {drift:.1e}/step, free-fall error {fall_err:.1e}, spin |w| change {spin_err:.1e} over 10 s")


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_gradient_correctness(criterion_report):
    report = run_gradcheck(probes=100, seed=2024)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in report.max_rel_error.items())
    _record(criterion_report, 2, report.passed(1e-5), f"max relative error over 100 probes: {detail}")


# -- 3 and 4 share the expert runs ------------------------------------------------------


@pytest.fixture(scope="module")
def complete_failure_runs():
    params = QuadParams()
    n = 100
    episode = EpisodeConfig(fault_free_fraction=0.0)
    state, fault = sample_trials(n, seed=77, params=params, severity=0.0, rotors=np.arange(n) % N_ROTORS, episode=episode)
    steps = episode.episode_steps
    ideal = simulate(make_controller("expert-ideal", params), state, fault, P_DES, steps, params)
    fdd = simulate(make_controller("expert-fdd", params), state, fault, P_DES, steps, params)
    return ideal, fdd, fault


def test_criterion_3_expert_recovery(criterion_report, complete_failure_runs):
    log, _, fault = complete_failure_runs
    n = log.lanes
    per = [metrics(log, P_DES, lane=i) for i in range(n)]
    final = np.linalg.norm(log.p[-50:] - P_DES, axis=-1).mean(axis=0)
    max_xy = np.array([m.max_xy_pos_err for m in per])
    max_wz = np.array([m.max_yaw_rate for m in per])
    good = ~log.crashed & (max_xy < 1.0) & (final < 0.2) & (max_wz < 25.0)
    rotors = sorted(set(np.asarray(fault.rotor).tolist()))
    ok = good.sum() >= 99 and rotors == [0, 1, 2, 3]
    _record(
        criterion_report, 3, ok,
        f"{good.sum()}/{n} recovered (all four rotors); worst max xy {np.nanmax(max_xy):.3f} m, "
        f"worst steady-state {np.max(final):.3f} m, worst |w_z| {np.max(max_wz):.1f} rad/s",
    )


def test_criterion_4_fdd_delay(criterion_report, complete_failure_runs):
    ideal, fdd, fault = complete_failure_runs
    n = fdd.lanes
    t_fault = np.asarray(fault.t_fault)
    latency = np.full(n, np.inf)
    for i in range(n):
        target = f"complete({int(fault.rotor[i])})"
        for row, t in zip(fdd.mode, fdd.t):
            if row[i] == target:
                latency[i] = t - t_fault[i]
                break
    post = fdd.t >= t_fault[0]
    tilt_ideal = np.nanmax(_tilt_deg(ideal.q[post]), axis=0)
    tilt_fdd = np.nanmax(_tilt_deg(fdd.q[post]), axis=0)
    fast = float(np.mean(latency <= 0.2 + 1e-9))
    worse = tilt_fdd > tilt_ideal
    ok = fast >= 0.95 and bool(np.all(worse))
    _record(
        criterion_report, 4, ok,
        f"latency <= 0.2 s in {100 * fast:.0f}% (median {np.median(latency):.2f} s); FDD peak tilt above ideal in "
        f"{worse.sum()}/{n} matched trials (median {np.median(tilt_fdd):.1f} vs {np.median(tilt_ideal):.1f} deg)",
    )


# -- 5 ---------------------------------------------------------------------------------


def _random_minibatch(policy: PolicyParams, rng: np.random.Generator, n: int) -> Minibatch:
    obs = rng.standard_normal((n, OBS_DIM))
    out = policy_forward(policy, obs)
    actions = out.mean + 0.1 * rng.standard_normal(out.mean.shape)
    return Minibatch(
        obs=obs,
        actions=actions,
        old_log_prob=gaussian_log_prob(actions, out.mean, policy.log_std) + 0.1 * rng.standard_normal(n),
        old_values=out.value + 0.3 * rng.standard_normal(n),
        advantages=rng.standard_normal(n),
        returns=rng.standard_normal(n),
        expert_u=rng.uniform(0, 13, (n, 4)),
        labels=np.eye(4)[rng.integers(0, 4, n)],
    )


def test_criterion_5_loss_algebra(criterion_report):
    a0 = bc_alpha(0)
    a100 = bc_alpha(100)
    sel = selector_loss(np.array([1.0, 0, 0, 0]), np.full(4, 0.25))

    rng = np.random.default_rng(5)
    policy = PolicyParams.init(rng)
    mb = _random_minibatch(policy, rng, 32)
    g_sel, g_rl, g_bc = component_grads(policy, mb)
    lin = 0.0
    for alpha, w in ((a100, 1.0), (0.8, 0.3)):
        _, _, grads = loss_and_grads(policy, mb, alpha, w)
        lin = max(lin, max(float(np.max(np.abs(g - (w * s + (1 - alpha) * r + alpha * b)))) for g, s, r, b in zip(grads, g_sel, g_rl, g_bc)))
    ok = abs(a0 - 1.0) < 1e-12 and abs(a100 - math.exp(-1)) < 1e-12 and lin < 1e-10 and abs(sel - 0.75) < 1e-12
    _record(criterion_report, 5, ok, f"alpha(0)={a0}, alpha(100)={a100:.12f}, linearity error {lin:.1e}, uniform-vs-one-hot {sel:.12f}")


# -- 6, 8, 10: trained policy ------------------------------------------------------------


def _curve(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained_policy():
    weights = MAIN_RUN / "policy.ftcw"
    if not weights.exists():
        return None
    return load_policy(weights)


def test_criterion_6_desk_scale_training(criterion_report, trained_policy):
    if trained_policy is None:
        _record(criterion_report, 6, False, f"no trained policy at {MAIN_RUN}")
    steps = int(_curve(MAIN_RUN / "curve.csv")[-1]["steps"])
    summary = batch_eval(200, "policy", seed=123_456, weights=trained_policy)
    median_xy = summary.quantiles["max_xy_pos_err"]["q50"]
    ok = steps <= 20_000_000 and summary.success_rate >= 0.8 and median_xy < 1.0
    _record(
        criterion_report, 6, ok,
        f"{steps / 1e6:.1f}M steps; success {100 * summary.success_rate:.1f}% of 200 trials "
        f"(crash {100 * summary.crash_rate:.1f}%), median post-fault max xy error {median_xy:.3f} m",
    )


def test_criterion_8_selector_accuracy(criterion_report, trained_policy):
    if trained_policy is None:
        _record(criterion_report, 8, False, f"no trained policy at {MAIN_RUN}")
    params = QuadParams()
    n = 100
    state, fault = sample_trials(n, seed=987_654, params=params, severity=0.0)
    log = simulate(make_controller("policy", params, trained_policy), state, fault, P_DES, 500, params)
    window = log.t >= np.asarray(fault.t_fault)[0] + 0.5
    sel = log.sel[window]
    valid = ~np.isnan(sel[..., 0])
    picked = np.argmax(np.nan_to_num(sel), axis=-1)
    hit = (picked == np.asarray(fault.rotor)[None, :]) & valid
    acc = float(hit.sum() / valid.sum())
    _record(criterion_report, 8, acc >= 0.95, f"selector argmax = failed rotor on {100 * acc:.1f}% of {valid.sum()} post-fault steps")


def test_criterion_10_fig6_metrics_report(criterion_report, trained_policy, tmp_path):
    scenario = Scenario()
    rows = {}
    for name in ("expert-ideal", "expert-fdd", "policy"):
        if name == "policy" and trained_policy is None:
            continue
        log = run_scenario(scenario, name, weights=trained_policy, log_path=tmp_path / f"{name}.csv")
        rows[name] = metrics(log).__dict__
    (tmp_path / "fig6_metrics.json").write_text(json.dumps(rows, indent=2))
    ok = "policy" in rows and all(np.isfinite(v["max_xy_pos_err"]) for v in rows.values())
    detail = "; ".join(
        f"{k}: max {v['max_xy_pos_err']:.3f} m, avg {v['avg_xy_pos_err']:.3f} m, vel {v['avg_xy_vel_err']:.3f} m/s"
        + (" (crashed)" if v["crashed"] else "")
        for k, v in rows.items()
    )
    _record(criterion_report, 10, ok, f"reference-scenario metrics (simulation only; hardware values are out of reach): {detail}")


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_ablation_ordering(criterion_report):
    finals: dict[str, list[float]] = {}
    grids = set()
    for name in ("none", "no-bc", "no-selector-ctrl", "no-selector-sup"):
        runs = sorted((ABLATION_RUN / name).glob("seed*/curve.csv"))
        vals = []
        for path in runs:
            curve = _curve(path)
            grids.add(tuple(r["steps"] for r in curve))
            tail = [float(r["mean_return"]) for r in curve[-5:] if r["mean_return"] != "nan"]
            vals.append(float(np.mean(tail)))
        finals[name] = vals
    seeds = min(len(v) for v in finals.values())
    mean = {k: float(np.mean(v)) if v else float("nan") for k, v in finals.items()}
    ok = (
        seeds >= 3
        and len(grids) == 1
        and mean["none"] >= mean["no-bc"]
        and mean["none"] >= mean["no-selector-ctrl"]
    )
    detail = ", ".join(f"{k} {v:.1f}" for k, v in mean.items())
    _record(criterion_report, 7, ok, f"seed-mean final return over {seeds} seeds: {detail}")


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_9_serialization(criterion_report, tmp_path):
    rng = np.random.default_rng(9)
    policy = PolicyParams.init(rng)
    path = tmp_path / "w.ftcw"
    save_weights(path, policy.networks())
    loaded = load_weights(path)
    exact = all(
        np.array_equal(a.astype(np.float32), b.astype(np.float32))
        for x, y in zip(policy.networks(), loaded)
        for a, b in zip(x.params(), y.params())
    )
    data = path.read_bytes()
    codes = []
    for corrupt, expected in (
        (b"FTCX" + data[4:], BadMagicError),
        (data[:4] + (9).to_bytes(4, "little") + data[8:], VersionMismatchError),
        (data[: len(data) // 2], TruncatedFileError),
    ):
        path.write_bytes(corrupt)
        try:
            load_weights(path)
            codes.append(None)
        except expected as exc:
            codes.append(exc.code)
        except Exception:  # noqa: BLE001 - any other error is a failure of this criterion
            codes.append("wrong")
    ok = exact and codes == ["bad-magic", "version-mismatch", "truncated"]
    _record(criterion_report, 9, ok, f"round-trip bit-exact={exact}; error codes {codes}")
