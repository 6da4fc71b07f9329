"""Experiment configuration: a flat ``key = value`` text file.

Lines starting with ``#`` are comments. Lists are whitespace or comma
separated. Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

from .. import gp
from ..baselines import PSO_INERTIA, PSO_WEIGHTS
from ..env import EnvConfig
from ..gridmap import default_map, read_map
from ..groundtruth import ALGAE, WQP, GTConfig
from ..learner.ddql import TrainConfig

PLANNERS = ("ddql", "lmpp", "rwpp", "pso")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    map: str = "default"
    gt: str = ALGAE
    agents: int = 1
    planner: str = "rwpp"
    reward: str = "mu"
    model: str = "auto"                # local | global | auto (global for pso)
    episodes: int = 10
    seeds: Tuple[int, ...] = (0,)
    budget: int = 50
    lengthscale_min: float = gp.LENGTHSCALE_BOUNDS[0]
    lengthscale_max: float = gp.LENGTHSCALE_BOUNDS[1]
    restrict_fusion: bool = False
    out: str = "out"
    checkpoint: Optional[str] = None
    oracle: bool = False
    traces: bool = True
    # baselines
    pso_inertia: float = PSO_INERTIA
    pso_weights: Tuple[float, ...] = PSO_WEIGHTS
    # training
    train_episodes: int = 600
    lr: float = 1e-4
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 1e-4
    eps_min: float = 0.05
    eps_decay: Optional[float] = None  # default: reach eps_min at half the episodes
    buffer_capacity: int = 50_000
    checkpoint_every: int = 100
    # gp-bench
    bench_missions: int = 20
    bench_agents: int = 3
    render_step: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.gt not in (WQP, ALGAE):
            raise ConfigError(f"gt must be wqp or algae, got {self.gt!r}")
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {', '.join(PLANNERS)}, got {self.planner!r}")
        if self.reward not in ("mu", "sigma"):
            raise ConfigError(f"reward must be mu or sigma, got {self.reward!r}")
        if self.model not in ("local", "global", "auto"):
            raise ConfigError(f"model must be local, global or auto, got {self.model!r}")
        if self.agents < 1:
            raise ConfigError("agents must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.episodes < 1 or self.train_episodes < 1:
            raise ConfigError("episode counts must be positive")
        if self.map != "default" and not Path(self.map).is_file():
            raise ConfigError(f"map file not found: {self.map}")
        if not 0 < self.lengthscale_min <= self.lengthscale_max:
            raise ConfigError("need 0 < lengthscale_min <= lengthscale_max")

    # -- derived configs -----------------------------------------------------
    def navmap(self):
        return default_map() if self.map == "default" else read_map(self.map)

    def model_kind(self) -> str:
        if self.model != "auto":
            return self.model
        return "global" if self.planner == "pso" else "local"

    def env_config(self, navmap=None, agents=None, model=None) -> EnvConfig:
        return EnvConfig(
            navmap=navmap if navmap is not None else self.navmap(),
            n_agents=agents or self.agents,
            gt=GTConfig(self.gt),
            reward=self.reward,
            budget=self.budget,
            model=model or self.model_kind(),
            lengthscale_bounds=(self.lengthscale_min, self.lengthscale_max),
            restrict_fusion=self.restrict_fusion,
        )

    def train_config(self, seed: int) -> TrainConfig:
        decay = self.eps_decay
        if decay is None:
            decay = (1.0 - self.eps_min) / (self.train_episodes / 2)
        return TrainConfig(
            env=self.env_config(model="local"), episodes=self.train_episodes, lr=self.lr,
            batch_size=self.batch_size, gamma=self.gamma, tau=self.tau, eps_min=self.eps_min,
            eps_decay=decay, buffer_capacity=self.buffer_capacity,
            checkpoint_every=self.checkpoint_every, seed=seed)


_LISTS = {"seeds": int, "pso_weights": float}
_OPTIONAL = {"checkpoint": str, "eps_decay": float, "render_step": int}
_BOOLS = {"1": True, "true": True, "yes": True, "on": True,
          "0": False, "false": False, "no": False, "off": False}


def _convert(name: str, text: str):
    if name in _LISTS:
        return tuple(_LISTS[name](p) for p in text.replace(",", " ").split())
    if name in _OPTIONAL:
        return None if text.lower() == "none" else _OPTIONAL[name](text)
    default = _DEFAULTS[name]
    if isinstance(default, bool):
        if text.lower() not in _BOOLS:
            raise ValueError(f"expected a boolean, got {text!r}")
        return _BOOLS[text.lower()]
    return type(default)(text)


_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    values = dataclasses.asdict(cfg)
    known = set(values)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
