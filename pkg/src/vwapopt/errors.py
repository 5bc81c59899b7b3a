"""Exception types shared across the package."""


class VwapError(Exception):
    """Base class for all package errors."""


class DataError(VwapError):
    """Malformed or invalid market data.

    ``row`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(VwapError):
    """A numerical routine failed (singular system, overflow, non-convergence)."""


class SingularConditioningError(NumericalError):
    def __init__(self, message, condition_number=float("nan")):
        self.condition_number = condition_number
        super().__init__(f"{message} (condition estimate {condition_number:.3e})")


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (final residual {residual:.3e})")
