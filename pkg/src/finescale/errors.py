"""Exception hierarchy for finescale.

Every error raised by the package derives from FinescaleError so callers can
catch broadly; specific subclasses distinguish bad inputs from numerical
breakdowns (the CLI maps these onto distinct exit codes).
"""


class FinescaleError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FinescaleError, ValueError):
    """Caller passed a value that violates a precondition."""


class FormatError(FinescaleError, ValueError):
    """A file failed to parse; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidPartitionError(FinescaleError, ValueError):
    """A fine cell is assigned to zero or multiple coarse cells."""


class InsufficientDataError(FinescaleError, ValueError):
    """Too few observations for the requested computation."""


class FitFailureError(FinescaleError, RuntimeError):
    """An optimizer or estimator could not produce a valid fit."""


class UndefinedRangeError(FinescaleError, ValueError):
    """Effective range is undefined (zero partial sill)."""


class NotPositiveDefiniteError(FinescaleError, RuntimeError):
    """A matrix required to be SPD failed factorization."""


class NumericFailureError(FinescaleError, RuntimeError):
    """A linear-algebra kernel failed irrecoverably."""


class TooLargeError(FinescaleError, ValueError):
    """Input exceeds a hard size guard for a dense-path computation."""


class EmptyBasisError(FinescaleError, ValueError):
    """An operation produced or received an empty basis set."""


class InsufficientNeighborsError(FinescaleError, ValueError):
    """A local neighborhood holds fewer points than required."""


class SelectionAbortedError(FinescaleError, RuntimeError):
    """Forward selection failed mid-loop; carries the trace so far."""

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class SingularDesignError(FinescaleError, ValueError):
    """Design matrix is rank deficient."""


class NoNeighborsError(FinescaleError, ValueError):
    """A kriging window is empty even after expansion."""


class NotConvergedWarning(UserWarning):
    """EM hit the iteration cap; best-so-far parameters were returned."""
