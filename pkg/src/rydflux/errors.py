"""Exception types shared by the package."""


class ConfigurationError(ValueError):
    """Invalid geometry, dressing or scenario parameters."""


class ResonanceError(ConfigurationError):
    """A perturbative denominator vanishes."""


class ConvergenceError(RuntimeError):
    """A numerical procedure failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
