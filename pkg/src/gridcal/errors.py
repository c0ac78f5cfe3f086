"""Exception types shared across the package."""


class GridcalError(Exception):
    """Base class for all gridcal errors."""


class GridFormatError(GridcalError):
    """The grid file could not be parsed or violates the schema."""


class GridValidationError(GridcalError):
    """The grid data is structurally invalid (dangling reference, bad value)."""


class PowerFlowError(GridcalError):
    """Steady-state network solve failed to converge."""

    def __init__(self, message: str, mismatch: float | None = None):
        super().__init__(message)
        self.mismatch = mismatch


class NewtonError(GridcalError):
    """Implicit time step failed to converge."""

    def __init__(self, message: str, t: float, residual: float, iterations: int):
        super().__init__(message)
        self.t = t
        self.residual = residual
        self.iterations = iterations


class SamplingError(GridcalError):
    """Posterior rejection sampling collapsed (acceptance rate too low)."""

    def __init__(self, message: str, acceptance_rate: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class ConfigError(GridcalError):
    """Run configuration is missing or invalid; carries the offending field path."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ReportError(GridcalError):
    """Report emission could not find the expected run artifacts."""

    def __init__(self, message: str, missing: list[str] | None = None):
        super().__init__(message)
        self.missing = missing or []
