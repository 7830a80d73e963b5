"""Exception hierarchy for the precoding package."""


class PrecodingError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PrecodingError, ValueError):
    """Shapes of matrices disagree with each other or with the configuration."""


class ConfigError(PrecodingError, ValueError):
    """A system configuration or experiment spec violates its invariants."""


class IllConditionedError(PrecodingError, ArithmeticError):
    """A positive-definite solve failed.

    Parameters
    ----------
    message : str
        Human-readable description.
    condition : float
        2-norm condition estimate of the offending matrix.
    """

    def __init__(self, message, condition=float("nan")):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class InvalidCacheError(PrecodingError, ValueError):
    """The effective-channel cache does not match the precoder it claims to represent."""


class DegenerateInputError(PrecodingError, ValueError):
    """A normalization would divide by a (numerically) vanishing norm."""


class DegenerateStepError(DegenerateInputError):
    """A retraction step lands on a point where a scale factor vanishes."""


class PreconditionError(PrecodingError, ValueError):
    """An operation was called with an input outside its domain (e.g. infeasible point)."""


class StalledLineSearchError(PrecodingError, RuntimeError):
    """Armijo backtracking exceeded its budget.

    The best step found and the partial iteration trace are attached so the
    caller can still inspect the run.
    """

    def __init__(self, message, best_step=0.0, trace=None):
        super().__init__(message)
        self.best_step = best_step
        self.trace = trace


class CountingUnavailableError(PrecodingError, RuntimeError):
    """A complexity report was requested from a trace recorded without counting."""


class ChannelFileError(PrecodingError, ValueError):
    """A channel file is malformed; ``offset`` points at the offending byte or line."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyInputError(PrecodingError, ValueError):
    """Summaries need at least one record."""
