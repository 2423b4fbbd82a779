"""YAML configuration with ``params``, ``gains``, ``training`` and ``scenario`` sections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .expert import ExpertGains
from .harness import Scenario
from .highlevel import PidState
from .sim import QuadParams
from .training import TrainConfig

SECTIONS = ("params", "gains", "training", "scenario")
PID_KEYS = ("kp", "ki", "kd", "integral_limit", "a_max")
EXPERT_KEYS = ("K", "k_att", "latency")


class ConfigError(ValueError):
    code = "config"


@dataclass
class Config:
    params: QuadParams = field(default_factory=QuadParams)
    pid: PidState = field(default_factory=PidState)
    gains: ExpertGains = field(default_factory=ExpertGains)
    training: TrainConfig = field(default_factory=TrainConfig)
    scenario: Scenario = field(default_factory=Scenario)


def _params(d: dict) -> QuadParams:
    known = {f.name for f in fields(QuadParams)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown params keys: {sorted(bad)}")
    d = dict(d)
    if "inertia" in d:
        d["inertia"] = tuple(float(x) for x in d["inertia"])
    return QuadParams(**d)


def _gains(d: dict) -> tuple[PidState, ExpertGains]:
    bad = set(d) - set(PID_KEYS) - set(EXPERT_KEYS) - {"n_body"}
    if bad:
        raise ConfigError(f"unknown gains keys: {sorted(bad)}")
    pid = PidState()
    for key in ("kp", "ki", "kd"):
        if key in d:
            setattr(pid, key, np.broadcast_to(np.asarray(d[key], dtype=float), (3,)).copy())
    for key in ("integral_limit", "a_max"):
        if key in d:
            setattr(pid, key, float(d[key]))
    kw = {}
    if "K" in d:
        kw["K"] = np.broadcast_to(np.asarray(d["K"], dtype=float), (3,)).copy()
    if "n_body" in d:
        kw["n_body"] = np.asarray(d["n_body"], dtype=float)
    for key in ("k_att", "latency"):
        if key in d:
            kw[key] = float(d[key])
    return pid, ExpertGains(**kw)


def load_config(path: str | Path | None) -> Config:
    """Parse a config file; missing sections and keys keep their defaults."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    bad = set(raw) - set(SECTIONS)
    if bad:
        raise ConfigError(f"unknown config sections: {sorted(bad)}")
    cfg = Config()
    try:
        if raw.get("params"):
            cfg.params = _params(raw["params"])
        if raw.get("gains"):
            cfg.pid, cfg.gains = _gains(raw["gains"])
        if raw.get("training"):
            cfg.training = TrainConfig.from_dict(raw["training"])
        if raw.get("scenario"):
            cfg.scenario = Scenario.from_dict(raw["scenario"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg
