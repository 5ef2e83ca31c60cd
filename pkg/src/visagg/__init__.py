"""Visually grounded iterative aggregation of reasoning trajectories.

The package splits into: core types and config (`core`), the structured tag
format (`tags`), generation backends (`backends`), object grounding
(`grounding`), the aggregation engine (`engine`), rollout rewards (`rewards`),
group-weighted policy math (`gspo`), evaluation tooling (`evalkit`), and the
CLI (`cli`).
"""

from .core import (
    ConfigError,
    EngineConfig,
    MultimodalInput,
    Population,
    RewardConfig,
    Trajectory,
    VisaggError,
    load_config,
    normalize_answer,
)
from .engine import Engine, RunTrace

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Engine",
    "EngineConfig",
    "MultimodalInput",
    "Population",
    "RewardConfig",
    "RunTrace",
    "Trajectory",
    "VisaggError",
    "load_config",
    "normalize_answer",
    "__version__",
]
