"""Exception types raised by the solvers and the scenario runner."""


class FPControlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FPControlError, ValueError):
    """Invalid model name, catalog entry or scenario parameter."""


class KernelUnderResolved(ConfigurationError):
    """Kernel support radius too small for the grid spacing."""


class StepFailed(FPControlError):
    """Nonlinear or linear solve did not converge within its budget."""

    def __init__(self, message, step=None, residual=None):
        self.step = step
        self.residual = residual
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class NumericalBlowup(StepFailed):
    """NaN or Inf showed up in a residual."""


class GridMismatch(FPControlError, ValueError):
    """Two fields or runs live on incompatible grids."""


class ParticleEscape(FPControlError):
    """Too many particles hit the box boundary; the box is too small."""
