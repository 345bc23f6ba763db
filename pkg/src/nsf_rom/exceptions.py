"""Exception hierarchy shared across the package."""


class NSFError(Exception):
    """Base class for all errors raised by nsf_rom."""


class ParameterDomainError(NSFError, ValueError):
    """A material or configuration parameter is outside its valid range."""


class NumericError(NSFError, ArithmeticError):
    """Non-finite input or output encountered."""


class InvertedElementError(NumericError):
    """A deformation gradient has non-positive determinant."""


class LogDomainError(NumericError):
    """A log-strain model received a non-positive singular value."""


class OutOfDomainError(NSFError, ValueError):
    """A particle left the safe interior region of the background grid."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class ShapeError(NSFError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ArchitectureError(NSFError, ValueError):
    """A network cannot be built for the requested input size."""


class TrainingDivergedError(NSFError, RuntimeError):
    """Training loss became non-finite."""


class ModelCorruptionError(NumericError):
    """A decoder produced non-finite values."""


class WellPosednessError(NSFError, ValueError):
    """Too few sample particles for the latent dimension."""


class UndefinedMetricError(NSFError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero denominator)."""


class ConfigError(NSFError, ValueError):
    """Invalid scene or pipeline configuration."""


class FormatError(NSFError, ValueError):
    """A file does not follow the expected binary layout."""


class DependencyError(NSFError, RuntimeError):
    """A pipeline stage was requested before its prerequisites exist."""
