"""Exception types shared across the package."""


class QRLatticeError(Exception):
    """Base class for all package errors."""


class InputError(QRLatticeError, ValueError):
    """Malformed call arguments: wrong dimensions, tau outside (0, 1), unknown category."""


class ConfigError(QRLatticeError, ValueError):
    """Invalid model, training, data or run configuration."""


class NumericalError(QRLatticeError, ArithmeticError):
    """A numerical procedure diverged or failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
