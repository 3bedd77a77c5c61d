"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Input violates an operation's precondition."""


class NumericFailure(ArithmeticError):
    """A computation produced NaN or Inf."""


class CapacityExhausted(ValueError):
    """Exemplar memory cannot hold even one sample per class."""


class InvalidState(RuntimeError):
    """Object is not in a state that permits the requested operation."""


class IngestionError(ValueError):
    """A data file could not be parsed or failed validation."""
