"""Exception hierarchy shared by all lfpp modules."""


class LfppError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(LfppError):
    """Invalid configuration or violated module precondition."""


class DomainError(LfppError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ResolutionError(LfppError):
    """Grid or torus too coarse for the requested accuracy."""


class CapacityError(LfppError):
    """Problem size exceeds a dense-computation budget."""


class NumericError(LfppError):
    """Factorization failure or non-finite intermediate values."""


class UnreachableError(LfppError):
    """No admissible path or chain connects the query endpoints."""


class StructuralError(LfppError):
    """Malformed path, broken geometric construction or failed invariant."""


class DepthError(LfppError):
    """Recursion needs finer field bands than were supplied."""
