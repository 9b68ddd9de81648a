"""Exception hierarchy shared by every module."""


class AdaptiveLQRError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(AdaptiveLQRError, ValueError):
    """Invalid dimensions, parameters or experiment configuration."""


class NumericalError(AdaptiveLQRError, ArithmeticError):
    """A numerical routine failed or produced unusable output."""


class NonConvergenceError(NumericalError):
    """Fixed-point iteration exhausted its budget before reaching tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InstabilityError(NumericalError):
    """A matrix that must be Schur stable has spectral radius >= 1."""


class SingularityError(NumericalError):
    """A linear system is singular and no regularisation was requested."""


class IntegrityError(AdaptiveLQRError):
    """A recorded trace does not match the seed or dynamics it claims."""
