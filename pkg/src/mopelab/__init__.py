"""Mixture-of-prompt-experts multimodal prompt fusion at desk scale."""

from .config import RunConfig, load, loads
from .errors import ConfigError, ContractError, DataError, DimensionError, MopeError, NumericError, ParameterError
from .fusion import FusionModel, build_model

__all__ = [
    "RunConfig",
    "load",
    "loads",
    "FusionModel",
    "build_model",
    "MopeError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "NumericError",
    "ParameterError",
]

__version__ = "0.1.0"
