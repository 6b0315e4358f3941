"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """A state point lies outside the problem's open domain."""


class ConfigurationError(ValueError):
    """Inconsistent or unstable configuration (e.g. CFL violation)."""


class GridMismatchError(ValueError):
    """Two grid functions do not live on the same node set."""


class NumericalError(RuntimeError):
    """NaN/overflow during stepping; carries the offending slice index."""

    def __init__(self, message, slice_index=None):
        super().__init__(message)
        self.slice_index = slice_index


class ConvergenceError(RuntimeError):
    """Fixed-point iteration did not converge; carries the last iterate."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
