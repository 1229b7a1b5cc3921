"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``ParameterError`` -> 2,
``DataError`` -> 3, ``RefusalError`` -> 4.
"""


class FoldTipError(Exception):
    """Base class for all package errors."""


class ParameterError(FoldTipError, ValueError):
    """A numeric argument violates an operation's precondition."""


class DataError(FoldTipError):
    """The input record cannot support the requested computation."""


class EmptyRecordError(DataError):
    pass


class DegenerateGridError(DataError):
    pass


class DegenerateFitError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class IntegrationError(FoldTipError, ArithmeticError):
    """The SDE integrator produced a non-finite state."""


class RefusalError(FoldTipError):
    """A prediction was refused on numerical grounds."""


class NoApproachError(RefusalError):
    """The decay rate shows no significant trend toward the fold."""
