"""Scikit-learn estimator facade over the build / retrieve / exit pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .collector import (
    EmbeddingSource,
    LabeledExample,
    LayeredPredictor,
    build_database,
    infer_with_exit,
)
from .index import FlatIndex
from .policy import ExitDecision, PolicyConfig


class RetrievalExitClassifier(BaseEstimator, ClassifierMixin):
    """Early-exit classifier guided by nearest-neighbor exit profiles.

    Fitting runs the layered backbone once over the training inputs,
    recording for each input the layers where it was predicted correctly
    and at what confidence, keyed by an embedding of the input. Prediction
    embeds each query, retrieves the k nearest stored profiles, picks the
    exit layer whose threshold-filtered, distance-weighted mass is largest
    (earliest on ties), and runs the backbone only up to that layer.

    Parameters
    ----------
    predictor : LayeredPredictor
        The frozen layered backbone; it is only ever run, never modified.

    k : int, default=12
        Number of nearest neighbors retrieved per query.

    tau : float, default=0.9
        Confidence threshold; stored records below it contribute nothing.
        Values above 1.0 filter everything and force full inference.

    epsilon : float, default=1e-12
        Lower clamp applied to retrieval distances before weighting.

    metric : {"l2", "cosine"}, default="l2"
        Distance used by the retrieval index.

    fallback : int or "final", default="final"
        Exit layer used when no retrieved record survives the threshold.

    encoder : callable, optional
        External embedding function for retrieval keys. Mutually exclusive
        with a nonzero `backbone_layer`.

    backbone_layer : int, default=0
        Backbone layer whose hidden state keys the retrieval; 0 uses the
        embedding-layer output.

    Attributes
    ----------
    database_ : ExitDatabase
        Exit profiles collected from the training data.

    index_ : FlatIndex
        Exact nearest-neighbor index over the training embeddings.

    classes_ : ndarray
        Class labels the backbone can emit (0..num_classes-1).
    """

    def __init__(
        self,
        predictor: LayeredPredictor | None = None,
        k: int = 12,
        tau: float = 0.9,
        epsilon: float = 1e-12,
        metric: str = "l2",
        fallback: int | str = "final",
        encoder=None,
        backbone_layer: int = 0,
    ):
        self.predictor = predictor
        self.k = k
        self.tau = tau
        self.epsilon = epsilon
        self.metric = metric
        self.fallback = fallback
        self.encoder = encoder
        self.backbone_layer = backbone_layer

    def _embedding_source(self) -> EmbeddingSource:
        return EmbeddingSource(encoder=self.encoder, backbone_layer=self.backbone_layer)

    def _config(self) -> PolicyConfig:
        return PolicyConfig(
            k=self.k, tau=self.tau, epsilon=self.epsilon, fallback_layer=self.fallback
        )

    def fit(self, X, y) -> "RetrievalExitClassifier":
        """Collect exit profiles for (X, y) and build the retrieval index.

        X is a sequence of inputs accepted by the predictor (for array
        backbones, an (n, d) matrix); y holds integer class labels.
        """
        if self.predictor is None:
            raise ValueError("predictor must be provided")
        cfg = self._config()  # validates the knobs before any work
        labels = np.asarray(y)
        inputs = list(X)
        if labels.shape[0] != len(inputs):
            raise ValueError(f"X has {len(inputs)} inputs but y has {labels.shape[0]} labels")
        dataset = [
            LabeledExample(id=i, input=inp, label=int(lab))
            for i, (inp, lab) in enumerate(zip(inputs, labels))
        ]
        source = self._embedding_source()
        self.database_ = build_database(self.predictor, dataset, source)
        self.index_ = FlatIndex(metric=self.metric).fit(self.database_.key_matrix())
        self.classes_ = np.arange(self.predictor.num_classes)
        self.config_ = cfg
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "database_"):
            raise NotFittedError("RetrievalExitClassifier must be fitted first")

    def decide(self, X) -> list[ExitDecision]:
        """Exit decisions (layer, mass, hits, fallback flag) per input."""
        self._require_fitted()
        source = self._embedding_source()
        return [
            infer_with_exit(self.predictor, self.index_, self.database_, inp, self.config_, source)[1]
            for inp in X
        ]

    def predict(self, X) -> np.ndarray:
        """Predicted class per input, each computed at its decided exit layer."""
        self._require_fitted()
        source = self._embedding_source()
        preds = [
            infer_with_exit(self.predictor, self.index_, self.database_, inp, self.config_, source)[0]
            for inp in X
        ]
        return np.asarray(preds)

    def exit_layers(self, X) -> np.ndarray:
        """Decided exit layer per input."""
        return np.asarray([d.layer for d in self.decide(X)])
