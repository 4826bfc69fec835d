"""Exception hierarchy shared by the package."""


class GnmrError(Exception):
    """Base class for every error raised by gnmr."""


class ConfigError(GnmrError, ValueError):
    """Invalid configuration value or combination."""


class ValidationError(ConfigError):
    """A graph config or experiment config failed validation."""


class ShapeError(GnmrError, ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(GnmrError, ValueError):
    """An operation that needs at least one element got none."""


class GradientError(GnmrError, RuntimeError):
    """Misuse of the backward pass (non-scalar loss, reused tape, stale grads)."""


class NumericalError(GnmrError, FloatingPointError):
    """NaN or Inf detected in values or gradients."""


class ParseError(GnmrError, ValueError):
    """Malformed C-MAPSS input file."""


class LoadError(GnmrError, ValueError):
    """Corrupt or incompatible serialized artifact."""


class CompatibilityError(GnmrError):
    """Artifacts that must agree (checkpoint vs dataset cache) do not."""
