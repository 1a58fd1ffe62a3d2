"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3, verification failures with 4.
"""


class LowbitError(Exception):
    """Base class for all errors raised by lowbit."""


class ConfigError(LowbitError):
    """Invalid configuration, missing inputs, or malformed requests."""


class TensorFormatError(LowbitError):
    """A tensor container is malformed or an entry cannot be honored."""


class NumericalError(LowbitError):
    """A numerical operation failed (non-finite data, broken preconditions)."""


class FactorizationError(NumericalError):
    """Cholesky factorization broke down.

    Attributes:
        pivot: zero-based index of the column whose pivot was not positive,
            in the ordering of the matrix handed to the factorization.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot
