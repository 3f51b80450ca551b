"""Exception types raised across the package."""


class FtlabError(Exception):
    """Base class for all package errors."""


class DomainError(FtlabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedError(FtlabError, NotImplementedError):
    """The requested parameter range is deliberately not supported."""


class GridMismatchError(FtlabError, ValueError):
    """Two objects that must share a time grid (or Hurst index) do not."""


class FactorizationError(FtlabError, ArithmeticError):
    """A covariance matrix could not be factorized at working precision."""


class FlowSolverError(FtlabError, ArithmeticError):
    """The Runge-Kutta flow solver could not meet its local error budget."""


class InversionError(FtlabError, ArithmeticError):
    """Pointwise inversion of the flow map failed (no bracket, divergence)."""


class ConfigError(FtlabError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
