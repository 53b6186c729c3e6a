"""Identification of linear state dynamics observed through an input-dependent (bilinear) output map.

``x_{t+1} = A x_t + B u_t + w_t``, ``y_t = (C_0 + sum_i C_i u_{t,i}) x_t + D u_t + v_t``.
Two estimators are provided: direct maximum likelihood (:func:`fit_ml`) and
expectation maximization (:func:`fit_em`).
"""

from .em import EmOptions, fit_em, kalman_filter, rts_smooth
from .errors import (
    BilinSysIdError,
    CalibrationError,
    ConditioningError,
    CovarianceError,
    DegenerateValidationError,
    EstimationError,
    ExcitationError,
    FormatError,
    OptimizationError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
)
from .evaluation import (
    McConfig,
    normalized_output_error,
    param_relative_error,
    run_monte_carlo,
    runtime_benchmark,
)
from .ml import FitOptions, fit_ml, log_likelihood, ml_cost, ml_cost_oracle, ml_gradient
from .model import Dataset, Dims, SystemParams, check_input_excitation, validate_params
from .report import EstimationReport
from .simulate import calibrate_snr, gen_random_binary, gen_sinusoid, simulate
from .systems import discretize_rc, example1, example2, scalar_system, zoh_discretize

__version__ = "0.1.0"

__all__ = [
    "BilinSysIdError", "CalibrationError", "ConditioningError", "CovarianceError",
    "Dataset", "DegenerateValidationError", "Dims", "EmOptions", "EstimationError",
    "EstimationReport", "ExcitationError", "FitOptions", "FormatError", "McConfig",
    "OptimizationError", "ParameterError", "ShapeError", "SystemParams",
    "UndefinedMetricError", "calibrate_snr", "check_input_excitation", "discretize_rc",
    "example1", "example2", "fit_em", "fit_ml", "gen_random_binary", "gen_sinusoid",
    "kalman_filter", "log_likelihood", "ml_cost", "ml_cost_oracle", "ml_gradient",
    "normalized_output_error", "param_relative_error", "rts_smooth", "run_monte_carlo",
    "runtime_benchmark", "scalar_system", "simulate", "validate_params", "zoh_discretize",
]
