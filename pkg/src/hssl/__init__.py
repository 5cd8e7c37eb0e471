"""Heterogeneous self-supervised pre-training on a from-scratch numpy autodiff stack."""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, FormatError,
                     GeometryError, HsslError, NumericalError, ParameterError, PolicyError,
                     UndefinedMetricError)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DimensionError", "FormatError",
    "GeometryError", "HsslError", "NumericalError", "ParameterError", "PolicyError",
    "UndefinedMetricError", "__version__",
]
