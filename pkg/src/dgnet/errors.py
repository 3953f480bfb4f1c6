"""Exception hierarchy shared by every dgnet module."""


class DGNetError(Exception):
    """Base class for all dgnet errors."""


class DimensionError(DGNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(DGNetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(DGNetError, ValueError):
    """Input data is outside the accepted domain (e.g. pixel range)."""


class UsageError(DGNetError, RuntimeError):
    """An API was called in a state where the call is not allowed."""


class NumericalError(DGNetError, ArithmeticError):
    """A computation produced a non-finite value."""


class IntegrityError(DGNetError, IOError):
    """A serialized artifact is truncated, corrupt, or of the wrong version."""
