"""Exception types shared across the package.

ValidationError covers bad user input (configs, shapes, file contents) and
maps to exit code 2 in the CLI; everything else is a runtime failure (exit 1).
"""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or format."""


class NumericsError(RuntimeError):
    """Raised when a computation produces non-finite values."""
