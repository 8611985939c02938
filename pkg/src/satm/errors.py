"""Exception types shared across the package."""


class SatmError(Exception):
    """Base class for every error raised by this package."""


class ContractError(SatmError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class NumericError(SatmError, ArithmeticError):
    """Non-finite values appeared in an input or an intermediate result."""


class DivergenceError(NumericError):
    """An iterative procedure produced non-finite state.

    ``where`` names the step or epoch at which it happened.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(SatmError, ValueError):
    """A file does not follow the expected binary layout."""


class UnsupportedVersionError(FormatError):
    pass


class DegenerateTrajectoryError(SatmError, ValueError):
    """No expert segment with a usable normaliser could be found."""
