"""Liouville first-passage percolation: fields, geodesics, crossings and LQG covers."""
from .errors import (CapacityError, ConfigError, DepthError, DomainError, LfppError, NumericError,
                     ResolutionError, StructuralError, UnreachableError)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "DepthError", "DomainError", "LfppError", "NumericError",
    "ResolutionError", "StructuralError", "UnreachableError", "__version__",
]
