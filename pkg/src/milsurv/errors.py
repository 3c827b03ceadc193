"""Exception types shared across the package.

Two families are distinguished because the CLI maps them to different exit
codes: bad inputs (2) and numerical failures (3).
"""


class ValidationError(ValueError):
    """Input data or parameters violate a precondition."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed (singular system, divergence, blowup)."""
