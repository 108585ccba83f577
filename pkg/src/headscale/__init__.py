"""Length generalization lab for position-encoding-free causal transformers."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataError, DimensionError, HeadScaleError, NonFiniteError,
                     ParameterError, TokenIndexError, UsageError)
from .model import AttentionTrace, Model, ModelConfig, ScaleVector, init_model, parameter_count

__all__ = [
    "AttentionTrace", "ConfigError", "ContractError", "DataError", "DimensionError", "HeadScaleError", "Model",
    "ModelConfig", "NonFiniteError", "ParameterError", "ScaleVector", "TokenIndexError", "UsageError",
    "init_model", "parameter_count",
]
