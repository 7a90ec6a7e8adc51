"""Sieve estimation of auction models with unobserved heterogeneity from consecutive order statistics."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    EstimationError,
    IdentificationError,
    NumericError,
    ParameterError,
)
from .sieve_model import SieveParams, SieveWeights

__all__ = [
    "ConfigError",
    "EstimationError",
    "IdentificationError",
    "NumericError",
    "ParameterError",
    "SieveParams",
    "SieveWeights",
    "__version__",
]
