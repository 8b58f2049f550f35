"""Exception hierarchy shared across the solver modules."""


class UgksError(Exception):
    """Base class for all solver errors."""


class InvalidStateError(UgksError):
    """Macroscopic state violates positivity/finiteness."""


class RealizabilityError(UgksError):
    """Moment vector is not realizable (f0 <= 0 with f1 != 0, or u >= 1)."""


class DegenerateDensityError(UgksError):
    """f0 below the degenerate-density threshold where the ansatz is undefined."""


class RenormalizationError(UgksError):
    """Half-moment sum vanished while the exact total did not."""


class MeshFormatError(UgksError):
    """Malformed mesh file; carries a line number when available."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshValidationError(UgksError):
    """Structurally invalid mesh (non-conforming, bad orientation, zero area)."""


class GeometryError(UgksError):
    """Degenerate edge geometry (h <= 0 or zero-length edge)."""


class StepFailure(UgksError):
    """Time step produced a non-realizable or non-finite state."""


class DiagnosticError(UgksError):
    """A diagnostic could not be produced (e.g. stationary solve not converged)."""


class ConfigError(UgksError):
    """Bad run configuration."""
