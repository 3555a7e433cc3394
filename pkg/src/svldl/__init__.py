"""Selective-variance label distribution learning for ordinal age regression.

The package covers target-distribution construction, the five-part hybrid
loss with analytic gradients, the evaluation metrics, a small trainable
prediction head over precomputed feature sequences, dataset plumbing, and a
scikit-learn style estimator wrapper.
"""

from .distributions import (
    FirstDifference,
    LabelDistribution,
    VarianceCandidateSet,
    distribution_mean,
    distribution_std,
    first_difference,
    gaussian_label_distribution,
    make_candidate_set,
)
from .losses import (
    HybridGradients,
    LossReport,
    LossWeights,
    ccc_loss,
    diff_loss,
    focal_loss,
    hybrid_loss,
    kl_divergence,
    svldl_kl_loss,
    svldl_select,
    variance_loss,
)
from .metrics import EvalReport, eval_report, mae, pcc, unimodal_coefficient
from .model import (
    ModelConfig,
    ModelParameters,
    SGDOptimizer,
    TrainSettings,
    evaluate_model,
    forward,
    layer_weighted_sum,
    load_checkpoint,
    predict,
    save_checkpoint,
    stats_pooling,
    train_model,
    train_step,
)
from .data import Sample, load_features, load_manifest, load_samples, split, synth_generate, write_features
from .estimator import SVLDLRegressor

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "FirstDifference",
    "HybridGradients",
    "LabelDistribution",
    "LossReport",
    "LossWeights",
    "ModelConfig",
    "ModelParameters",
    "SGDOptimizer",
    "SVLDLRegressor",
    "Sample",
    "TrainSettings",
    "VarianceCandidateSet",
    "ccc_loss",
    "diff_loss",
    "distribution_mean",
    "distribution_std",
    "eval_report",
    "evaluate_model",
    "first_difference",
    "focal_loss",
    "forward",
    "gaussian_label_distribution",
    "hybrid_loss",
    "kl_divergence",
    "layer_weighted_sum",
    "load_checkpoint",
    "load_features",
    "load_manifest",
    "load_samples",
    "mae",
    "make_candidate_set",
    "pcc",
    "predict",
    "save_checkpoint",
    "split",
    "stats_pooling",
    "svldl_kl_loss",
    "svldl_select",
    "synth_generate",
    "train_model",
    "train_step",
    "unimodal_coefficient",
    "variance_loss",
]
