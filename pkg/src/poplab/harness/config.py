"""Flat JSON run configuration.

One level of keys, no nesting — every knob a command needs sits in the
same namespace so configs diff cleanly. Unknown keys are rejected
loudly instead of being ignored, which has bitten everyone at least
once. ``POP_SEED`` in the environment overrides the seed from any file
(useful for seed-sweep loops around the CLI).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from ..datagen import GenConfig
from ..errors import ConfigurationError
from ..predictor import ModelConfig

ENV_SEED = "POP_SEED"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset
    n_scenes: int = 400
    t_h: int = 20
    t_f: int = 30
    dt: float = 0.1
    substeps: int = 1
    min_agents: int = 2
    max_agents: int = 6
    trend_switch_prob: float = 0.0
    # model
    d: int = 32
    k_modes: int = 6
    n_layers: int = 2
    n_heads: int = 4
    n_freqs: int = 8
    # optimization
    epochs_teacher: int = 5
    epochs_ssl: int = 3
    epochs_distill: int = 3
    batch_size: int = 8
    lr: float = 5e-4
    strategy: str = "scratch+ssl+distill"
    # evaluation / simulation
    k_eval: int = 6
    k_plan: int = 1
    sim_seeds: int = 3

    def gen_config(self) -> GenConfig:
        return GenConfig(n_scenes=self.n_scenes, t_h=self.t_h, t_f=self.t_f,
                         dt=self.dt, substeps=self.substeps,
                         min_agents=self.min_agents,
                         max_agents=self.max_agents,
                         trend_switch_prob=self.trend_switch_prob)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, k_modes=self.k_modes,
                           n_layers=self.n_layers, n_heads=self.n_heads,
                           n_freqs=self.n_freqs, t_h=self.t_h, t_f=self.t_f)

    def budget(self):
        # training imports this package for checkpoints; import lazily
        from ..training import StageBudget
        return StageBudget(teacher=self.epochs_teacher,
                           ssl=self.epochs_ssl,
                           distill=self.epochs_distill)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File -> overrides -> POP_SEED, later wins. Both args optional."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(
                f"config {path} must hold a flat JSON object")
        values.update(raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    known = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(
            f"unknown config keys: {unknown}; known keys: {sorted(known)}")

    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigurationError(
                f"{ENV_SEED} must be an integer, got {env_seed!r}")

    cfg = RunConfig(**values)
    # surface type mistakes (e.g. "lr": "small") before they propagate
    for name in ("seed", "n_scenes", "t_h", "t_f", "d", "k_modes"):
        if not isinstance(getattr(cfg, name), int):
            raise ConfigurationError(f"config key {name!r} must be an int")
    for name in ("dt", "lr", "trend_switch_prob"):
        if not isinstance(getattr(cfg, name), (int, float)):
            raise ConfigurationError(f"config key {name!r} must be a number")
    return cfg


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(cfg.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
