"""Exception hierarchy.

Two families matter to callers: :class:`UserError` (bad input, mismatched
configuration) and :class:`NumericalError` (the data were fine but the
numerics failed).  The CLI maps them to exit codes 1 and 2.
"""


class RemError(Exception):
    """Base class for all package errors."""


class UserError(RemError, ValueError):
    pass


class NumericalError(RemError, ArithmeticError):
    pass


class SpecMismatchError(UserError):
    """Inputs were produced under a different statistic specification."""

    def __init__(self, message=""):
        super().__init__(f"spec mismatch: {message}" if message else "spec mismatch")


class FrontierError(UserError):
    """A stream batch starts at or before the last pooled event time."""


class BudgetExceededError(UserError):
    pass


class CheckpointError(UserError):
    pass


class RateOverflowError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    pass
