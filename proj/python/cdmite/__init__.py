"""Conformal diffusion prediction sets for individual treatment effects."""

from ._cdmite import (
    BoostedTrees,
    ConfigError,
    DiffusionModel,
    FormatError,
    NumericError,
    PredictionSet,
    ShapeError,
    __version__,
    balance_weight,
    build_prediction_set,
    config_hash,
    fit_gbm,
    generate_dataset,
    lemma1_check,
    local_weights,
    membership_equivalence_check,
    nonconformity_score,
    normalize_weights,
    run_replicate,
    train_denoiser,
    weighted_quantile,
)

__all__ = [
    "BoostedTrees",
    "ConfigError",
    "DiffusionModel",
    "FormatError",
    "NumericError",
    "PredictionSet",
    "ShapeError",
    "__version__",
    "balance_weight",
    "build_prediction_set",
    "config_hash",
    "fit_gbm",
    "generate_dataset",
    "lemma1_check",
    "local_weights",
    "membership_equivalence_check",
    "nonconformity_score",
    "normalize_weights",
    "run_replicate",
    "train_denoiser",
    "weighted_quantile",
]
