class JointModelError(Exception):
    """Base class for all errors raised by ``jm_scan``."""


class ValidityError(JointModelError, ValueError):
    """Data, model specification or parameters violate an invariant."""


class SchemaError(JointModelError, ValueError):
    """An input file does not follow the documented CSV or config schema."""


class UnsortedInputError(JointModelError, ValueError):
    """A linear scan received observation times that are not sorted."""


class SingularMatrixError(JointModelError, ArithmeticError):
    """
    A matrix that has to be inverted is singular or not positive definite.

    Args:
        message (str): Human readable description.
        min_eigenvalue (float, optional): Smallest eigenvalue of the offending matrix.
    """

    def __init__(self, message: str, min_eigenvalue: float | None = None):
        if min_eigenvalue is not None:
            message = f"{message} (min eigenvalue {min_eigenvalue:.3e})"
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NumericOverflowError(JointModelError, FloatingPointError):
    """
    An exponent exceeded the overflow guard.

    Args:
        exponent (float): The value that would have been exponentiated.
    """

    def __init__(self, exponent: float, where: str = ""):
        super().__init__(f"Exponent {exponent:.6g} exceeds overflow guard{' in ' + where if where else ''}")
        self.exponent = exponent


class ConvergenceError(JointModelError, ArithmeticError):
    """An iterative solver did not reach its tolerance."""


class ZeroDenominatorError(JointModelError, ZeroDivisionError):
    """A risk-set denominator vanished."""
