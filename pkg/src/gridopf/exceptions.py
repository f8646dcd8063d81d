"""Exception hierarchy shared across the package."""


class GridOpfError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GridOpfError):
    """Invalid grid/scenario file or inconsistent configuration."""


class PowerFlowDivergedError(GridOpfError):
    """Newton iteration failed to reach the mismatch tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class LowVoltageError(PowerFlowDivergedError):
    """A voltage magnitude collapsed below the trust threshold during iteration."""


class UnobservableError(GridOpfError):
    """The measurement set does not pin down the full voltage state."""

    def __init__(self, message, nullspace_dim=None):
        super().__init__(message)
        self.nullspace_dim = nullspace_dim


class EstimationDivergedError(GridOpfError):
    """Gauss-Newton refinement of the voltage estimate failed to converge."""


class InvalidCovarianceError(GridOpfError):
    """Covariance input is not symmetric positive semidefinite within tolerance."""


class DegenerateEstimateError(GridOpfError):
    """Voltage estimate too close to zero to define a magnitude direction."""
