"""Run configuration: nested dataclasses loaded from YAML with unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .roadnet import SCENARIO_IDS


class ConfigError(ValueError):
    pass


@dataclass
class TrainSchedule:
    episodes: int = 2000           # N_e
    planner_freeze: int = 500      # N_g: last planner update happens in episode N_g - 1
    mask_start: int = 800          # N_m: masks are consumed from episode N_m + 1
    window: int = 10               # T_m
    planner_epochs: int = 5        # K_m
    decision_epochs: int = 5       # K_d
    predictor_steps: int = 5       # K_p
    predictor_batch: int = 64      # N_b
    replay_capacity: int = 50_000
    probe_size: int = 256
    probe_refresh: int = 100
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.planner_freeze < self.mask_start:
            raise ConfigError("schedule needs planner_freeze < mask_start")
        for name in ("episodes", "window", "predictor_batch", "replay_capacity", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule.{name} must be positive")


@dataclass
class TrafficSettings:
    spawn_rate: float = 0.15
    max_vehicles: int = 10
    speed_range: tuple[float, float] = (4.0, 8.0)
    warmup_steps: int = 50


@dataclass
class NetSettings:
    dim: int = 128
    heads: int = 4
    conv_channels: tuple[int, int, int] = (8, 16, 16)


@dataclass
class PpoSettings:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    minibatch: int | None = None
    decision_lr: float = 5e-5
    decision_lr_late: float = 1e-5
    planner_lr: float = 1e-4
    planner_lr_late: float = 1e-5
    lr_switch_step: int = 2000
    normalize_advantages: bool = False


@dataclass
class RunConfig:
    scenarios: list[str] = field(default_factory=lambda: list(SCENARIO_IDS))
    seed: int = 0
    gccp: str = "learned"
    goal_conditioning: bool = True
    max_steps: int = 600
    eval_flows: int = 50
    predictor_lr: float = 1e-4
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    traffic: TrafficSettings = field(default_factory=TrafficSettings)
    policy_net: NetSettings = field(default_factory=NetSettings)
    predictor_net: NetSettings = field(default_factory=NetSettings)
    ppo: PpoSettings = field(default_factory=PpoSettings)
    actions: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.gccp not in ("learned", "cv", "disabled"):
            raise ConfigError(f"gccp must be learned, cv or disabled, got {self.gccp!r}")
        unknown = [s for s in self.scenarios if s not in SCENARIO_IDS]
        if unknown or not self.scenarios:
            raise ConfigError(f"unknown scenarios {unknown}; expected a subset of {list(SCENARIO_IDS)}")


_NESTED = {"schedule": TrainSchedule, "traffic": TrafficSettings, "policy_net": NetSettings,
           "predictor_net": NetSettings, "ppo": PpoSettings}
_TUPLES = {"speed_range", "conv_channels"}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is RunConfig and k in _NESTED:
            v = _build(_NESTED[k], v, f"{k}.")
        elif k in _TUPLES:
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    def clean(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v
    return clean(dataclasses.asdict(cfg))


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML file (or start from defaults) and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(data)


def dump(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
