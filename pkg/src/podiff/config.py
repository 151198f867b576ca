"""JSON run configuration shared by every CLI subcommand.

Layout (every key optional)::

    {"seed": 0,
     "env": {...}, "train": {...}, "flow": {...},
     "analysis": {...}, "composite": {...}, "paths": {...}}

Unknown keys are rejected with their dotted path.  The top-level ``seed``
is copied into ``train.seed`` and ``flow.seed`` unless those are given.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    grid: list = field(default_factory=lambda: [2, 2])
    num_targets: int = 1
    collectively_observable: bool = True
    failure_prob: float = 0.5
    block: int = 2
    episodes: int = 50
    episode_len: int = 10
    history_len: int = 1


@dataclass
class TrainSection:
    hidden_width: int = 1024
    hidden_layers: int = 6
    epochs: int = 1000
    batch_size: int = 512
    noise_sigma_range: list = field(default_factory=lambda: [0.0, 1.0])
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    lr_schedule: str = "cosine"
    seed: int | None = None


@dataclass
class FlowSection:
    max_iters: int = 200
    convergence_tol: float = 1e-5
    merge_radius: float = 0.05
    init_dist: str = "standard-normal"
    num_samples: int = 1000
    seed: int | None = None


@dataclass
class AnalysisSection:
    rank_tol: float = 1e-3
    epsilons: list = field(default_factory=list)
    epsilon_percentiles: list = field(default_factory=lambda: [10.0])


@dataclass
class CompositeSection:
    agent_order: object = "random(0)"
    K2: int = 100
    L: int | None = None
    D_phi: float | None = None
    init_sigma: float = 1.0


@dataclass
class PathsSection:
    env: str | None = None
    dataset: str | None = None
    model: str | None = None
    out: str = "."


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainSection = field(default_factory=TrainSection)
    flow: FlowSection = field(default_factory=FlowSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    composite: CompositeSection = field(default_factory=CompositeSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self):
        from .denoiser import TrainConfig
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size,
                           noise_sigma_range=tuple(t.noise_sigma_range),
                           learning_rate=t.learning_rate, beta1=t.beta1, beta2=t.beta2,
                           eps=t.eps, seed=t.seed, dtype=t.dtype, lr_schedule=t.lr_schedule)

    def flow_config(self):
        from .flow import FlowConfig
        f = self.flow
        return FlowConfig(max_iters=f.max_iters, convergence_tol=f.convergence_tol,
                          merge_radius=f.merge_radius, init_dist=f.init_dist,
                          num_samples=f.num_samples, seed=f.seed)

    def composite_config(self):
        from .composite import CompositeConfig
        c = self.composite
        return CompositeConfig(agent_order=c.agent_order, K2=c.K2, L=c.L, D_phi=c.D_phi,
                               init_sigma=c.init_sigma, flow=self.flow_config())


_SECTIONS = {"env": EnvSection, "train": TrainSection, "flow": FlowSection,
             "analysis": AnalysisSection, "composite": CompositeSection, "paths": PathsSection}


def _check_type(path, value, default, annotation):
    if value is None:
        if default is None or "None" in str(annotation):
            return value
        raise ConfigError(f"{path}: may not be null")
    ann = str(annotation)
    if isinstance(value, bool) and not ann.startswith("bool"):
        raise ConfigError(f"{path}: expected {ann}, got a boolean")
    if ann.startswith("bool") and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected a boolean")
    if ann.startswith("int") and not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer")
    if ann.startswith("float"):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if ann.startswith("str") and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    if ann == "list" and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list")
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + '.' if prefix else ''}{key}")
    obj = cls()
    for key, value in data.items():
        f = known[key]
        setattr(obj, key, _check_type(f"{prefix}.{key}", value, getattr(obj, key), f.type))
    return obj


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    for key in data:
        if key != "seed" and key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = _check_type("seed", data["seed"], 0, "int")
    for name, cls in _SECTIONS.items():
        setattr(cfg, name, _build(cls, data.get(name, {}), name))
    if cfg.train.seed is None:
        cfg.train.seed = cfg.seed
    if cfg.flow.seed is None:
        cfg.flow.seed = cfg.seed
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Semantic checks, delegated to the module config constructors."""
    g = cfg.env.grid
    if len(g) != 2 or not all(isinstance(v, int) and v > 0 for v in g):
        raise ConfigError("env.grid: expected [rows, cols] of positive integers")
    for name, build in (("train", cfg.train_config), ("flow", cfg.flow_config)):
        try:
            build()
        except ValueError as e:
            raise ConfigError(f"{name}: {e}") from e
    try:
        cfg.composite_config()
        from .composite import parse_order
        order = cfg.composite.agent_order
        # the agent count is unknown here, so check form only
        parse_order(order, 1 if isinstance(order, str) else len(order))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"composite: {e}") from e
    if cfg.env.episodes < 0 or cfg.env.history_len < 1 or cfg.env.episode_len < cfg.env.history_len:
        raise ConfigError("env: need episodes >= 0 and 1 <= history_len <= episode_len")


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_dict(data)


def env_spec_from(section: EnvSection, seed: int = 0):
    from .env import grid_sensor_net, sensor_net_2x2
    rows, cols = section.grid
    if (rows, cols) == (2, 2) and section.num_targets == 1:
        return sensor_net_2x2(section.collectively_observable, section.failure_prob, seed=seed)
    failure = () if section.collectively_observable else (0, 1)
    return grid_sensor_net(rows, cols, section.num_targets, section.block,
                           failure_areas=failure,
                           failure_prob=section.failure_prob if failure else 0.0, seed=seed)
