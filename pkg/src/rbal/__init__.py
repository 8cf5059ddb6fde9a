"""Balanced and relatively balanced embeddings of polarized manifolds."""
from .errors import (ConditioningError, ConfigError, DegenerateError, RbalError,
                     UnsupportedError, ValidationError)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConditioningError", "ConfigError", "DegenerateError", "RbalError",
           "UnsupportedError", "ValidationError"]
