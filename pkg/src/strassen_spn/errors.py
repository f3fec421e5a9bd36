"""Exception types shared across the package."""


class SpnError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(SpnError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SpnError, ValueError):
    """A layer or run configuration violates a structural constraint."""


class ValidationError(SpnError, ValueError):
    """Input data fails a value-level check (non-ternary weights, bad targets, ...)."""


class UsageError(SpnError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class NonFiniteError(SpnError, FloatingPointError):
    """NaN or Inf detected at a layer boundary."""


class TrainingDiverged(SpnError, FloatingPointError):
    """The training loss became non-finite."""


class FormatError(SpnError, ValueError):
    """A file does not follow its documented format."""
