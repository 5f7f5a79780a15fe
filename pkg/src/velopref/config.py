"""Run configuration: one JSON document, dotted ``--set`` overrides, strict key validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .mapmatch import MatchConfig
from .trajectories import FilterRules


class ConfigError(ValueError):
    pass


@dataclass
class WorldOptions:
    source: str = "synthetic"       # "synthetic" or "file"
    path: str | None = None
    rows: int = 20
    cols: int = 20
    blocked_fraction: float = 0.15
    feature_dim: int = 8
    planted_weights: list[float] | None = None
    smoothing: float = 2.0
    cell_size: float = 100.0


@dataclass
class TrajectoryOptions:
    source: str = "synthetic"       # "synthetic", "file" (trajectory JSON) or "raw" (trip CSV/JSON)
    path: str | None = None
    format: str | None = None
    n_trips: int = 2000
    n_od_pairs: int = 50
    n_heldout: int = 200
    heldout_fraction: float = 0.1   # file/raw sources: share of trips held out for evaluation
    reward_scale: float = 8.0
    step_cost: float = 11.0
    min_od_cells: int = 5
    max_steps: int = 400


@dataclass
class TrainOptions:
    gamma: float = 0.99
    horizon: int | None = None
    tol: float = 1e-9
    max_vi_iter: int = 100_000
    vi_method: str = "newton"
    epochs: int = 150
    learning_rate: float = 0.01
    lam: float = 1e-4
    width: int = 64
    depth: int = 4
    max_backtracks: int = 6


@dataclass
class RolloutOptions:
    mode: str = "greedy"
    max_steps: int = 400


@dataclass
class MetricOptions:
    include_nonterminated: bool = False


@dataclass
class ExplainOptions:
    background_size: int = 100
    budget: int = 1000
    local_trips: int = 5
    feature_names: list[str] | None = None
    feature_groups: dict[str, list[int]] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    world: WorldOptions = field(default_factory=WorldOptions)
    trajectories: TrajectoryOptions = field(default_factory=TrajectoryOptions)
    filter: FilterRules = field(default_factory=FilterRules)
    matching: MatchConfig = field(default_factory=MatchConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    rollout: RolloutOptions = field(default_factory=RolloutOptions)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    explain: ExplainOptions = field(default_factory=ExplainOptions)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every setting that can change an output byte (the output location cannot)."""
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def component_seed(self, component: str) -> int:
        """Per-component seed derived from the global seed."""
        offsets = {"world": 0, "experts": 1, "train": 2, "rollout": 3, "explain": 4, "split": 5}
        return int(self.seed) * 1000 + offsets[component]


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix or 'root'}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"unknown config key '{name}'")
        ftype = fields[key].default_factory if fields[key].default_factory is not dataclasses.MISSING else None
        if ftype is not None and dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, name)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends into a non-object")
        node[parts[-1]] = _parse_value(text)
    return doc


def validate(config: RunConfig) -> RunConfig:
    if config.world.source not in ("synthetic", "file"):
        raise ConfigError("world.source must be 'synthetic' or 'file'")
    if config.world.source == "file" and not (config.world.path and Path(config.world.path).exists()):
        raise ConfigError(f"world.path '{config.world.path}' does not exist")
    if config.trajectories.source not in ("synthetic", "file", "raw"):
        raise ConfigError("trajectories.source must be 'synthetic', 'file' or 'raw'")
    if config.trajectories.source != "synthetic" and not (
            config.trajectories.path and Path(config.trajectories.path).exists()):
        raise ConfigError(f"trajectories.path '{config.trajectories.path}' does not exist")
    if config.rollout.mode not in ("greedy", "stochastic"):
        raise ConfigError("rollout.mode must be 'greedy' or 'stochastic'")
    if not 0 < config.train.gamma <= 1:
        raise ConfigError("train.gamma must lie in (0, 1]")
    if config.train.tol <= 0:
        raise ConfigError("train.tol must be positive")
    if config.explain.budget < 1:
        raise ConfigError("explain.budget must be >= 1")
    return config


def load_config(path=None, overrides=None, seed: int | None = None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return validate(_build(RunConfig, doc, ""))
