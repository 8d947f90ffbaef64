"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DataError`` -> 3,
``DivergenceError`` -> 4.
"""


class NocbenchError(Exception):
    """Base class for toolkit errors."""


class DataError(NocbenchError, ValueError):
    """Malformed, inconsistent or out-of-range input data."""


class FormatError(DataError):
    """A binary or JSON artifact failed validation on load."""


class ShapeError(DataError):
    """Tensor or descriptor dimensions do not agree."""


class DivergenceError(NocbenchError, ArithmeticError):
    """A training objective became non-finite."""
