"""Exception hierarchy shared by every bvmlab module."""


class BvmLabError(Exception):
    """Base class for all laboratory errors."""


# Validation errors
class ConfigError(BvmLabError, ValueError):
    """Invalid experiment or model configuration."""


class NonMonotoneGridError(BvmLabError, ValueError):
    """Grid abscissae are not strictly increasing (or too short)."""


class NegativeDensityError(BvmLabError, ValueError):
    """Density ordinates contain negative values."""


class ZeroMassError(BvmLabError, ValueError):
    """All density ordinates are zero; nothing to normalize."""


class DimensionMismatchError(BvmLabError, ValueError):
    """Argument dimension does not match the law or target."""


class SupportMismatchError(BvmLabError, ValueError):
    """Posterior (or prior) mass is numerically zero on the requested support."""


class UnsupportedLawError(BvmLabError, NotImplementedError):
    """Operation is defined for one-dimensional laws only."""


# Numerical failures
class SingularInformationError(BvmLabError, ArithmeticError):
    """Information matrix is singular or not positive-definite."""


class TargetEvaluationError(BvmLabError, ArithmeticError):
    """A log-target returned NaN or +inf."""


# Sampler and model failures
class DiagnosticsError(BvmLabError, RuntimeError):
    """MCMC diagnostics failed (effective sample size too small)."""


class PriorRejectionError(BvmLabError, RuntimeError):
    """Rejection sampling from a conditioned prior exceeded its budget."""


class EnvelopeViolationError(BvmLabError, RuntimeError):
    """A mixture density left its envelope at a validated point."""


class ModelImplementationError(BvmLabError, RuntimeError):
    """A model's likelihood contradicts its declared support."""
