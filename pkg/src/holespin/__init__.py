"""Spin-qubit dephasing under nuclear and electrical noise: simulation and fitting."""

from .analysis import (
    calibrate_amplitude,
    fit_autocorr_model,
    fit_power_law_field,
    fit_scaling,
    fit_stretched_exp,
    gamma_from_lambda,
    global_alpha_fit,
    lambda_from_gamma,
    predict_T2star,
    simulate_intensity,
)
from .coherence import (
    DecayCurve,
    EngineRejection,
    NoiseEnvironment,
    echo_with_nuclear_precession,
    ff_visibility,
    mc_visibility,
)
from .fitting import FitResult
from .sequences import PulseModel, SequenceSpec
from .spin import QDParameters

__version__ = "0.1.0"

__all__ = [
    "DecayCurve",
    "EngineRejection",
    "FitResult",
    "NoiseEnvironment",
    "PulseModel",
    "QDParameters",
    "SequenceSpec",
    "__version__",
    "calibrate_amplitude",
    "echo_with_nuclear_precession",
    "ff_visibility",
    "fit_autocorr_model",
    "fit_power_law_field",
    "fit_scaling",
    "fit_stretched_exp",
    "gamma_from_lambda",
    "global_alpha_fit",
    "lambda_from_gamma",
    "mc_visibility",
    "predict_T2star",
    "simulate_intensity",
]
