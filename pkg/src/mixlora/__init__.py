"""Dynamic low-rank adaptation with routed rank-1 factor pools."""

from mixlora.adapter import (
    AdaptedLinear,
    FactorPool,
    MixLoraConfig,
    RouterParams,
    Selection,
    init_adapter,
)
from mixlora.errors import (
    ConfigError,
    ConstructionError,
    DegenerateGradientError,
    MixLoraError,
    NumericError,
    ShapeError,
    StateError,
    TrainingError,
)
from mixlora.lora import LoraLinear, init_lora

__all__ = [
    "AdaptedLinear",
    "ConfigError",
    "ConstructionError",
    "DegenerateGradientError",
    "FactorPool",
    "LoraLinear",
    "MixLoraConfig",
    "MixLoraError",
    "NumericError",
    "RouterParams",
    "Selection",
    "ShapeError",
    "StateError",
    "TrainingError",
    "init_adapter",
    "init_lora",
]
