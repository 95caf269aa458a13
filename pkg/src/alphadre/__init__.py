"""Density-ratio estimation with the alpha-divergence loss.

The estimator trains a scalar network ``T(x)`` whose normalized ``exp(-T)``
approximates ``q(x)/p(x)``.  Kernel baselines (uLSIF, KLIEP), a synthetic
Gaussian data generator and the benchmark experiments live alongside it.
"""

__version__ = "0.1.0"

from .baselines import KLIEP, ULSIF, KernelRatioModel, kernel_predict, kliep_fit, ulsif_fit
from .estimator import (
    AlphaDivRatioEstimator,
    DivergenceEstimate,
    RatioModel,
    TrainConfig,
    TrainingError,
    TrainTrace,
    estimate_divergence,
    normalize,
    predict_ratio,
    train,
    validate,
)
from .losses import LossKind, LossTag, alpha_div_loss, f_div_loss, gradient_regime_probe
from .nn import MlpModel, mlp_backward, mlp_forward, mlp_init
from .synthdata import GaussianSpec, SampleSet, closed_form_alpha_div, sample_mvn, true_ratio_gaussian

__all__ = [
    "AlphaDivRatioEstimator",
    "DivergenceEstimate",
    "GaussianSpec",
    "KLIEP",
    "KernelRatioModel",
    "LossKind",
    "LossTag",
    "MlpModel",
    "RatioModel",
    "SampleSet",
    "TrainConfig",
    "TrainTrace",
    "TrainingError",
    "ULSIF",
    "alpha_div_loss",
    "closed_form_alpha_div",
    "estimate_divergence",
    "f_div_loss",
    "gradient_regime_probe",
    "kernel_predict",
    "kliep_fit",
    "mlp_backward",
    "mlp_forward",
    "mlp_init",
    "normalize",
    "predict_ratio",
    "sample_mvn",
    "train",
    "true_ratio_gaussian",
    "ulsif_fit",
    "validate",
]
