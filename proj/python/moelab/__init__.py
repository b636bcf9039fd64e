"""Python bindings for the moelab C++ core."""

from ._core import (
    Ablation,
    AuxNormalization,
    ConfigError,
    DimensionError,
    ExperimentConfig,
    LossWeights,
    NonFiniteError,
    balanced_support,
    certify_lemma1,
    expert_overlap,
    find_cycle,
    forward,
    forward_backward,
    gradcheck,
    log_csv,
    maxvio,
    rmse,
    route,
    routing_variance,
    silhouette,
    train,
)

__version__ = "0.1.0"
