"""Persistence, configuration, CLI, and plot emission."""

from .checkpoint import (
    CHECKPOINT_VERSION,
    Checkpoint,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
)
from .config import ENV_SEED, RunConfig, load_config, save_config
from .plots import obs_curve_svg, save_svg, trace_svg

__all__ = [
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "ENV_SEED",
    "RunConfig",
    "load_checkpoint",
    "load_config",
    "make_checkpoint",
    "obs_curve_svg",
    "save_checkpoint",
    "save_config",
    "save_svg",
    "trace_svg",
]
