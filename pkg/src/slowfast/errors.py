"""Exception types shared across the package."""


class SlowFastError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SlowFastError):
    """Invalid parameter combination (step sizes, missing coefficients, ...)."""


class IntegrationDivergedError(SlowFastError):
    """A trajectory left the finite range.  Carries the offending step."""

    def __init__(self, message, step=None, path_index=None):
        super().__init__(message)
        self.step = step
        self.path_index = path_index


class CouplingError(SlowFastError):
    """Two trajectories that must share a grid and noise identity do not."""


class MixingProbeError(SlowFastError):
    """Synchronous-coupling distances did not decay; no mixing rate fitted."""


class RejectedSourceError(SlowFastError):
    """Source function failed the centering check against the invariant laws."""


class HomogenizationError(SlowFastError):
    """Assembled diffusion matrix is indefinite beyond Monte Carlo tolerance."""


class RateFitError(SlowFastError):
    """Not enough uncensored points to fit a convergence rate."""
