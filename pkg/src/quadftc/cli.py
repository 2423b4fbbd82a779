"""Command-line entry point: train, ablate, eval, batch-eval, grad-check, inspect.

Failures print a single ``error: <code>: <message>`` line on stderr and exit
with status 1. ``FTC_THREADS`` caps the numeric library's thread pool.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("FTC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import yaml  # noqa: E402

from .config import ConfigError, load_config  # noqa: E402
from .harness import CONTROLLERS, Scenario, batch_eval, inspect_weights, metrics, run_scenario  # noqa: E402
from .nn import WeightFileError  # noqa: E402
from .training import ABLATIONS, TrainingDiverged, train  # noqa: E402

log = logging.getLogger("quadftc")


def _error_code(exc: BaseException) -> str:
    if hasattr(exc, "code") and isinstance(exc.code, str):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return "not-found"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, ValueError):
        return "invalid-argument"
    return "internal"


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.training
    if args.ablation is not None:
        tc = replace(tc, ablation=args.ablation)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.steps is not None:
        tc = replace(tc, total_steps=args.steps)
    result = train(tc, params=cfg.params, out_dir=args.out, gains=cfg.gains, progress=True)
    last = result.curve[-1]
    print(json.dumps({"epochs": len(result.curve), "steps": last.steps, "mean_return": last.mean_return, "out": str(args.out)}))
    return 0


def _cmd_ablate(args) -> int:
    from .harness import ablation_suite

    cfg = load_config(args.config)
    tc = cfg.training if args.steps is None else replace(cfg.training, total_steps=args.steps)
    curves = ablation_suite(tc, seeds=args.seeds, ablations=args.ablations, out_dir=args.out, params=cfg.params, progress=True)
    final = {name: [c[-1].mean_return for c in runs] for name, runs in curves.items()}
    print(json.dumps({"final_mean_return": final}))
    return 0


def _load_scenario(path: str | None) -> tuple[Scenario, object]:
    if path is None:
        return Scenario(), load_config(None)
    raw = yaml.safe_load(Path(path).read_text()) if Path(path).exists() else None
    if raw is None and not Path(path).exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    if isinstance(raw, dict) and "scenario" in raw:
        cfg = load_config(path)
        return cfg.scenario, cfg
    try:
        return Scenario.from_dict(raw or {}), load_config(None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _cmd_eval(args) -> int:
    scenario, cfg = _load_scenario(args.scenario)
    if args.config:
        cfg = load_config(args.config)
    traj = run_scenario(scenario, args.controller, seed=args.seed, params=cfg.params, weights=args.weights,
                        gains=cfg.gains, pid=cfg.pid, log_path=args.log)
    if traj.steps == 0:
        print(json.dumps({"steps": 0}))
        return 0
    m = metrics(traj)
    events = []
    for i in range(1, traj.steps):
        if traj.mode[i][0] != traj.mode[i - 1][0]:
            events.append([round(float(traj.t[i]), 4), traj.mode[i][0]])
    print(json.dumps({"steps": traj.steps, "metrics": asdict(m), "mode_changes": events}))
    return 0


def _cmd_batch_eval(args) -> int:
    cfg = load_config(args.config)
    summary = batch_eval(args.n, args.controller, seed=args.seed, params=cfg.params, weights=args.weights,
                         severity=args.severity, out_dir=args.out, gains=cfg.gains)
    print(json.dumps({"n": summary.n, "success_rate": summary.success_rate, "crash_rate": summary.crash_rate,
                      "max_xy_pos_err": summary.quantiles["max_xy_pos_err"]}))
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.probes, args.seed)
    for name, err in report.max_rel_error.items():
        print(f"{name:20s} max relative error {err:.3e}")
    if not report.passed(args.tol):
        print(f"error: gradient-mismatch: worst relative error {report.worst:.3e} >= {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def _cmd_inspect(args) -> int:
    print(inspect_weights(args.weights))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadftc", description="Fault-tolerant quadrotor control: training and evaluation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--out", required=True, help="output directory for curve.csv and policy.ftcw")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total environment steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="train every ablation over several seeds")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--ablations", nargs="+", choices=ABLATIONS)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("eval", help="run one scenario and log the trajectory")
    p.add_argument("--controller", choices=CONTROLLERS, required=True)
    p.add_argument("--weights")
    p.add_argument("--scenario", help="YAML scenario (bare mapping or a config with a scenario section)")
    p.add_argument("--config", help="config for params and gains")
    p.add_argument("--log", help="CSV trajectory output")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("batch-eval", help="randomized recovery trials")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--controller", choices=CONTROLLERS, required=True)
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--severity", type=float, help="fix the failure coefficient of the faulted rotor")
    p.add_argument("--config")
    p.add_argument("--out", help="directory for summary.json and altitude.csv")
    p.set_defaults(func=_cmd_batch_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all network gradients")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("inspect", help="summarize a weight file")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=_cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (WeightFileError, ConfigError, TrainingDiverged, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {_error_code(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
