"""Profile collection and early-exit inference over a layered predictor.

`collect_profile` runs every layer of the backbone on one labeled example
and records each layer whose prediction matches the label, together with
the max-softmax confidence observed there. `build_database` folds that
over a dataset in order; `infer_with_exit` embeds a query, asks the policy
for an exit layer, and runs the backbone only that far.

Neither operation mutates the predictor: only inference is performed.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ._validation import as_key_vector
from .database import ExitDatabase, ExitRecord
from .index import FlatIndex
from .policy import ExitDecision, PolicyConfig, decide


class LayeredPredictor(ABC):
    """Contract for an m-layer classifier driven layer by layer.

    `embed` maps a raw input to the initial state and to the model's own
    layer-0 embedding (so using that embedding as a retrieval key costs no
    extra pass). `forward_layer` must be called with consecutive layer
    indices 1..l and must be deterministic given (state, layer).
    """

    @property
    @abstractmethod
    def num_layers(self) -> int: ...

    @property
    @abstractmethod
    def num_classes(self) -> int: ...

    @abstractmethod
    def embed(self, input: Any) -> tuple[Any, np.ndarray]:
        """Return (initial state h_0, layer-0 embedding as float32 vector)."""

    @abstractmethod
    def forward_layer(self, state: Any, layer: int) -> Any:
        """Advance one layer; `layer` is 1-based and must follow the previous call."""

    @abstractmethod
    def predict(self, state: Any) -> np.ndarray:
        """Class-probability vector for the current state (sums to 1 within 1e-6)."""

    def state_embedding(self, state: Any) -> np.ndarray:
        """Float32 view of a mid-stack state, for hidden-layer retrieval keys."""
        raise NotImplementedError(
            f"{type(self).__name__} does not expose mid-stack embeddings"
        )

    def fingerprint(self) -> str:
        """Stable digest of the model parameters, for no-write audits."""
        return ""


@dataclass(frozen=True)
class EmbeddingSource:
    """Where retrieval keys come from.

    Either an external encoder function mapping the raw input to a vector,
    or a backbone layer index L: 0 means the embedding-layer output, L >= 1
    means the hidden state after layer L (which costs running layers 1..L
    before the retrieval can happen).
    """

    encoder: Callable[[Any], np.ndarray] | None = None
    backbone_layer: int = 0

    def __post_init__(self) -> None:
        if self.encoder is not None and self.backbone_layer != 0:
            raise ValueError("specify either an encoder or a backbone layer, not both")
        if self.backbone_layer < 0:
            raise ValueError("backbone_layer must be >= 0")

    def describe(self) -> str:
        if self.encoder is not None:
            return "external-encoder"
        return f"backbone-layer:{self.backbone_layer}"


@dataclass(frozen=True)
class LabeledExample:
    id: int
    input: Any
    label: int


def _check_source(source: EmbeddingSource, num_layers: int) -> None:
    if source.encoder is None and source.backbone_layer > num_layers:
        raise ValueError(
            f"backbone_layer {source.backbone_layer} exceeds model depth {num_layers}"
        )


def collect_profile(
    predictor: LayeredPredictor,
    example: LabeledExample,
    embedding_source: EmbeddingSource = EmbeddingSource(),
) -> tuple[np.ndarray, list[ExitRecord]]:
    """Run all layers once; return the retrieval key and the exit records.

    A record (j, p) is emitted for every layer j whose argmax prediction
    equals the example's label, where p is the max softmax probability at
    that layer (the correct class's probability, since the prediction is
    correct there).
    """
    m = predictor.num_layers
    _check_source(embedding_source, m)
    if not 0 <= example.label < predictor.num_classes:
        raise ValueError(
            f"label {example.label} out of range [0, {predictor.num_classes})"
        )
    state, layer0_key = predictor.embed(example.input)
    if embedding_source.encoder is not None:
        key = as_key_vector(embedding_source.encoder(example.input), name="encoder key")
    elif embedding_source.backbone_layer == 0:
        key = as_key_vector(layer0_key, name="layer-0 key")
    else:
        key = None

    records: list[ExitRecord] = []
    for j in range(1, m + 1):
        state = predictor.forward_layer(state, j)
        if key is None and embedding_source.backbone_layer == j:
            key = as_key_vector(predictor.state_embedding(state), name="hidden key")
        probs = np.asarray(predictor.predict(state), dtype=np.float64)
        if int(np.argmax(probs)) == example.label:
            records.append(ExitRecord(j, float(probs.max())))
    assert key is not None
    return key, records


def build_database(
    predictor: LayeredPredictor,
    dataset: list[LabeledExample],
    embedding_source: EmbeddingSource = EmbeddingSource(),
) -> ExitDatabase:
    """Collect a profile per example, in dataset order, into a fresh database."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    db: ExitDatabase | None = None
    for example in dataset:
        try:
            key, records = collect_profile(predictor, example, embedding_source)
        except Exception as exc:
            raise RuntimeError(
                f"profile collection failed for example {example.id}: {exc}"
            ) from exc
        if db is None:
            db = ExitDatabase(
                dim=key.shape[0],
                num_layers=predictor.num_layers,
                metadata={"embedding_source": embedding_source.describe()},
            )
        db.add_entry(key, records)
    assert db is not None
    return db


def infer_with_exit(
    predictor: LayeredPredictor,
    index: FlatIndex,
    db: ExitDatabase,
    input: Any,
    cfg: PolicyConfig,
    embedding_source: EmbeddingSource = EmbeddingSource(),
) -> tuple[int, ExitDecision]:
    """Embed, pick an exit layer from retrieved neighbors, run only that far.

    For layer-0 or external-encoder keys, forward_layer is invoked exactly
    decision.layer times. A backbone_layer L >= 1 key source needs layers
    1..L before retrieval; those states are kept, so the total cost is
    max(L, decision.layer) layer calls and never more.
    """
    m = predictor.num_layers
    _check_source(embedding_source, m)
    state, layer0_key = predictor.embed(input)
    prefix: list[Any] = [state]  # prefix[j] is the state after layer j

    if embedding_source.encoder is not None:
        key = as_key_vector(embedding_source.encoder(input), name="encoder key")
    elif embedding_source.backbone_layer == 0:
        key = as_key_vector(layer0_key, name="layer-0 key")
    else:
        for j in range(1, embedding_source.backbone_layer + 1):
            state = predictor.forward_layer(state, j)
            prefix.append(state)
        key = as_key_vector(predictor.state_embedding(state), name="hidden key")

    decision = decide(index, db, key, cfg)
    target = decision.layer
    if target < len(prefix):
        state = prefix[target]
    else:
        state = prefix[-1]
        for j in range(len(prefix), target + 1):
            state = predictor.forward_layer(state, j)
    probs = np.asarray(predictor.predict(state), dtype=np.float64)
    return int(np.argmax(probs)), decision
