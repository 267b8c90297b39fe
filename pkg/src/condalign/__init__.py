"""Conditional distribution alignment of predicted behavior scores.

Predicted behaviors (watch time, like probability, ...) are confounded by
observable bias factors such as item duration.  ``condalign`` fits the
distribution of each behavior conditional on the bias bucket and maps every
prediction to a bucket-invariant score.
"""

from .align import (
    AlignedScore,
    FusionWeights,
    TargetDistribution,
    fuse,
    mean_align,
    quantile_map,
    score_pipeline,
    to_target,
)
from .behavior import (
    OraclePredictor,
    PredictorModel,
    TrainConfig,
    TrainingDivergedError,
    train_classifier,
    train_regressor,
)
from .conddist import (
    BiasSpec,
    Categorical,
    ConditionalModel,
    Continuous,
    ModelMismatchError,
    SpecError,
    cdf,
    cond_mean,
    discretize,
    discretize_many,
    fit_empirical,
    fit_in_chunks,
    fit_parametric,
    inv_cdf,
    merge,
)
from .config import ConfigError, ExperimentConfig, default_config, derive_seed
from .metrics import (
    bucket_stats,
    chi_square_uniformity,
    ks_against_target,
    ks_uniformity,
    mutual_information_binned,
    rank_correlation,
)
from .quantreg import QuantileRegConfig, QuantileRegModel, fit_quantile_regression
from .simulator import SignalSpec, SimConfig, SimulatedData, generate

__version__ = "0.1.0"

__all__ = [
    "AlignedScore", "BiasSpec", "Categorical", "ConditionalModel", "ConfigError", "Continuous",
    "ExperimentConfig", "FusionWeights", "ModelMismatchError", "OraclePredictor",
    "PredictorModel", "QuantileRegConfig", "QuantileRegModel", "SignalSpec", "SimConfig",
    "SimulatedData", "SpecError", "TargetDistribution", "TrainConfig", "TrainingDivergedError",
    "bucket_stats", "cdf", "chi_square_uniformity", "cond_mean", "default_config",
    "derive_seed", "discretize", "discretize_many", "fit_empirical", "fit_in_chunks",
    "fit_parametric", "fit_quantile_regression", "fuse", "generate", "inv_cdf",
    "ks_against_target", "ks_uniformity", "mean_align", "merge", "mutual_information_binned",
    "quantile_map", "rank_correlation", "score_pipeline", "to_target", "train_classifier",
    "train_regressor",
]
