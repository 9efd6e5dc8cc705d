"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class UnsupportedError(ValueError):
    """The request is valid but outside what the routine can handle."""
