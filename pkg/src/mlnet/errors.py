"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ParseError(ValueError):
    """Malformed dataset or config input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
