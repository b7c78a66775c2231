"""Routed suites of quantized experts over a single base model."""

__version__ = "0.1.0"

from .errors import (CapacityError, ConfigError, ContractError, DataError,
                     DependencyError, IntegrityError, MoqeError, NumericError,
                     RegistrationError, ShapeError, TrainingError)
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor", "no_grad",
    "MoqeError", "ShapeError", "ConfigError", "DataError", "ContractError",
    "NumericError", "TrainingError", "RegistrationError", "IntegrityError",
    "CapacityError", "DependencyError",
    "__version__",
]
