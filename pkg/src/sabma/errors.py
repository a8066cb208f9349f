"""Exception hierarchy shared across the package."""


class SabmaError(Exception):
    """Base class for all package errors."""


class ShapeError(SabmaError, ValueError):
    """Operand shapes do not agree at a graph node."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class NumericError(SabmaError, ArithmeticError):
    """A computation produced a non-finite or ill-conditioned result."""

    def __init__(self, message: str, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} (index {index})")


class ConfigError(SabmaError, ValueError):
    """Invalid experiment configuration or CLI input."""
