"""Exception hierarchy shared by every module."""


class StaTNError(Exception):
    """Base class for library errors."""


class ConfigurationError(StaTNError, ValueError):
    """Inconsistent layer sizes, dims or hyper-parameters."""


class InputError(StaTNError, ValueError):
    """Bad user-supplied data (labels, directories, images)."""


class ConstraintError(StaTNError):
    """A manifold-constrained parameter left its manifold."""


class NumericalError(StaTNError, ArithmeticError):
    """Rank deficiency, NaN losses and similar numerical breakdowns."""


class FormatError(InputError):
    """Malformed file contents (PPM header, model container)."""
