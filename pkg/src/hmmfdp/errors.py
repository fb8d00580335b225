"""Exception types raised across the package."""


class HMMFDPError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(HMMFDPError, ValueError):
    """A model parameter violates its invariants."""


class UnsupportedVariantError(HMMFDPError, TypeError):
    """An operation was asked of a density variant that cannot support it."""


class DegenerateLikelihoodError(HMMFDPError):
    """Both emission densities vanish at an observation."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"both emission densities are zero at observation {index + 1}")


class EstimationError(HMMFDPError):
    """Parameter estimation could not proceed (degenerate data or weights)."""


class EmptySelectionError(HMMFDPError, ValueError):
    """An operation needs a non-empty selection."""


class BootstrapError(HMMFDPError):
    """Too many bootstrap replicates failed to refit."""
