"""
Error types for the nonlocal geometry toolkit.

Two families map onto CLI exit codes: bad input (2) and numerical
failure (3). Every validation error names the offending field.
"""

from typing import Any, Optional, Tuple


class NonlocalToolkitError(Exception):
    """Root of every error raised by the toolkit."""

    exit_code = 1


class ValidationError(NonlocalToolkitError):
    """Input rejected before or during computation."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionMismatchError(ValidationError):
    pass


class UnsupportedShapeError(ValidationError):
    pass


class NotOnBoundaryError(ValidationError):
    pass


class CornerError(ValidationError):
    pass


class MeshError(ValidationError):
    pass


class NumericalFailure(NonlocalToolkitError):
    """Computation started but could not deliver a trustworthy value."""

    exit_code = 3


class QuadratureError(NumericalFailure):
    pass


class DivergentIntegralError(NumericalFailure):
    pass


class PlateauError(NumericalFailure):
    pass


class UnreachableVolumeError(NumericalFailure):
    """Volume target not attained; keeps the two solutions around it."""

    def __init__(self, message: str, bracket: Optional[Tuple[Any, Any]] = None):
        self.bracket = bracket
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Exit code the CLI uses for an exception."""
    if isinstance(error, NonlocalToolkitError):
        return error.exit_code
    return 1
