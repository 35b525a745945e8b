"""Retrieval-guided early exit for layered classifiers.

Builds a database of per-example exit profiles (the layers at which a
frozen layered backbone predicts each training example correctly, with
confidences), retrieves the nearest profiles for a query embedding, and
selects the exit layer with the largest threshold-filtered, distance-
weighted mass, falling back to full inference when nothing qualifies.
"""

from .collector import (
    EmbeddingSource,
    LabeledExample,
    LayeredPredictor,
    build_database,
    collect_profile,
    infer_with_exit,
)
from .database import (
    DatabaseStats,
    ExitDatabase,
    ExitProfile,
    ExitRecord,
    deserialize,
    serialize,
)
from .errors import ConfigError, FormatError
from .estimator import RetrievalExitClassifier
from .evaluation import (
    AblationRow,
    MetricsReport,
    ablate,
    evaluate,
    evaluate_entropy_baseline,
    evaluate_full_model,
    subsample_database,
)
from .index import FlatIndex, NeighborHit, brute_force_query, load_index
from .policy import (
    ExitDecision,
    PolicyConfig,
    decide,
    exit_mass,
    neighbor_weights,
    select_exit_layer,
)
from .synthetic import (
    CorrectRatioReport,
    SyntheticModelSpec,
    SyntheticPredictor,
    default_centers,
    entropy_exit_baseline,
    load_model_spec,
    make_clustered_dataset,
    make_synthetic_predictor,
    oracle_exit_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "AblationRow",
    "ConfigError",
    "CorrectRatioReport",
    "DatabaseStats",
    "EmbeddingSource",
    "ExitDatabase",
    "ExitDecision",
    "ExitProfile",
    "ExitRecord",
    "FlatIndex",
    "FormatError",
    "LabeledExample",
    "LayeredPredictor",
    "MetricsReport",
    "NeighborHit",
    "PolicyConfig",
    "RetrievalExitClassifier",
    "SyntheticModelSpec",
    "SyntheticPredictor",
    "ablate",
    "brute_force_query",
    "build_database",
    "collect_profile",
    "decide",
    "default_centers",
    "deserialize",
    "entropy_exit_baseline",
    "evaluate",
    "evaluate_entropy_baseline",
    "evaluate_full_model",
    "exit_mass",
    "infer_with_exit",
    "load_index",
    "load_model_spec",
    "make_clustered_dataset",
    "make_synthetic_predictor",
    "neighbor_weights",
    "oracle_exit_metrics",
    "select_exit_layer",
    "serialize",
    "subsample_database",
]
