"""Exception hierarchy shared by all modules."""


class RbalError(Exception):
    """Base class for library errors."""


class ConfigError(RbalError, ValueError):
    """Invalid configuration or out-of-contract input parameters."""


class ValidationError(RbalError, ValueError):
    """Input data violates a structural invariant (malformed file, zero section, ...)."""


class DegenerateError(RbalError):
    """Degenerate geometry at a grid point (zero section vector, non-positive metric)."""

    def __init__(self, message, point=None):
        super().__init__(message if point is None else f"{message} (point index {point})")
        self.point = point


class ConditioningError(RbalError):
    """Matrix too ill-conditioned for the configured guardrail."""


class UnsupportedError(RbalError, NotImplementedError):
    """Requested variant has no constructive definition in this library."""
