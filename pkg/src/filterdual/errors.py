"""Exception types shared across the package."""


class ModelError(ValueError):
    """A model or its inputs violate a structural requirement."""


class NumericalError(RuntimeError):
    """A numerical scheme left its domain of validity (blow-up, mass loss)."""


class RegressionError(NumericalError):
    """Least-squares regression was rank deficient at some time step."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (time index {step})")
        self.step = step


class GridMismatchError(ValueError):
    """Two trajectories were built on different time grids."""


class ConfigError(ValueError):
    """An experiment configuration is invalid or references missing files."""
