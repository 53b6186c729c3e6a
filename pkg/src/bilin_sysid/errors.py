"""Exception hierarchy.

Everything numerical derives from :class:`EstimationError` so callers (and the
CLI exit-code mapping) can separate numerical trouble from I/O trouble.
"""


class BilinSysIdError(Exception):
    """Base class for all package errors."""


class ShapeError(BilinSysIdError, ValueError):
    """An array does not have the shape implied by the model dimensions."""


class EstimationError(BilinSysIdError):
    """Base class for numerical failures."""


class CovarianceError(EstimationError):
    """A covariance matrix could not be factorized (not positive definite)."""


class ConditioningError(EstimationError):
    """A matrix needed by a cost, filter or smoother is numerically indefinite.

    ``term`` names the offending quantity and ``index`` carries a time step or
    iteration number when one is known.
    """

    def __init__(self, message, term=None, index=None):
        super().__init__(message)
        self.term = term
        self.index = index


class ExcitationError(EstimationError):
    """Gram matrices of the M-step are singular (inputs/outputs not exciting)."""


class OptimizationError(EstimationError):
    """The optimizer could not make progress."""


class CalibrationError(EstimationError):
    """Noise calibration is impossible for the given system and inputs."""


class DegenerateValidationError(EstimationError):
    """Every reference output is (numerically) zero."""


class UndefinedMetricError(EstimationError):
    """A relative error was requested against a zero-norm reference."""


class ParameterError(BilinSysIdError, ValueError):
    """Invalid physical or configuration parameter."""


class FormatError(BilinSysIdError):
    """A dataset or parameter file is malformed."""
