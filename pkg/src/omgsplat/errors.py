"""Exception types shared across the package."""


class OmgError(Exception):
    """Base class for all package errors."""


class InvalidInputError(OmgError, ValueError):
    """An argument violates an operation's precondition."""


class NumericDegeneracyError(OmgError, ArithmeticError):
    """A computation hit a singular or non-finite intermediate."""


class InvalidStateError(OmgError, RuntimeError):
    """Cached state does not belong to the call it is used with."""


class SceneParseError(OmgError, ValueError):
    """Malformed scene file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(OmgError, FloatingPointError):
    """Optimization produced a non-finite loss."""
