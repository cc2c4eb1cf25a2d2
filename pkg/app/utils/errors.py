"""
Error types shared by the quantization and pricing modules.
"""


class QuantizationError(Exception):
    """Base class for errors raised by the library."""

    category = "error"


class InvalidArgumentError(QuantizationError, ValueError):
    """Raised when an argument violates an operation's preconditions."""

    category = "invalid-argument"


class NumericalError(QuantizationError, ArithmeticError):
    """Raised when a computation produces non-finite values."""

    category = "numeric"
