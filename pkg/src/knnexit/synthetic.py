"""Deterministic synthetic layered classifiers and baseline exit policies.

The synthetic backbone scores an input against a set of cluster centers
(logit = negative squared distance to the nearest center of each class)
and perturbs the logits at layer j with noise drawn from a counter-based
generator keyed by (model seed, a content hash of the input, j). Every
output is therefore a pure function of the model spec and the input,
identical across calls, processes, and platforms - which is what makes
collected profiles exactly replayable.

A non-increasing noise schedule gives the usual "later layers are more
reliable" regime; schedules that rise again at the last layers create
inputs the full model gets wrong while intermediate layers get right,
which is the regime where retrieval-guided exits beat full inference.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass

import numpy as np

from ._validation import as_key_vector
from .collector import LabeledExample, LayeredPredictor
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Geometry and noise schedule of a synthetic backbone.

    cluster_centers is (num_clusters, feature_dim); cluster c carries class
    c % num_classes. layer_noise has one non-negative logit-noise scale per
    layer. cluster_spread is the per-coordinate sampling spread used by
    make_clustered_dataset.
    """

    m: int
    num_classes: int
    feature_dim: int
    cluster_centers: np.ndarray
    layer_noise: np.ndarray
    seed: int
    cluster_spread: float = 0.1

    def __post_init__(self) -> None:
        centers = np.asarray(self.cluster_centers, dtype=np.float64)
        noise = np.asarray(self.layer_noise, dtype=np.float64)
        object.__setattr__(self, "cluster_centers", centers)
        object.__setattr__(self, "layer_noise", noise)
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if centers.ndim != 2 or centers.shape[1] != self.feature_dim:
            raise ValueError(
                f"cluster_centers must be (num_clusters, {self.feature_dim}), "
                f"got {centers.shape}"
            )
        if centers.shape[0] < self.num_classes:
            raise ValueError("need at least one cluster per class")
        if noise.shape != (self.m,):
            raise ValueError(f"layer_noise must have length {self.m}, got {noise.shape}")
        if not np.isfinite(centers).all() or not np.isfinite(noise).all():
            raise ValueError("centers and noise must be finite")
        if np.any(noise < 0.0):
            raise ValueError("layer_noise must be non-negative")
        if self.cluster_spread < 0.0:
            raise ValueError("cluster_spread must be >= 0")

    @property
    def num_clusters(self) -> int:
        return self.cluster_centers.shape[0]


@dataclass(frozen=True)
class CorrectRatioReport:
    """Among examples the full model gets wrong, how many some earlier layer gets right."""

    n_final_wrong: int
    n_recoverable: int
    ratio: float


def default_centers(
    num_clusters: int, feature_dim: int, seed: int, center_scale: float = 2.0
) -> np.ndarray:
    """Deterministic cluster centers with controlled pairwise separation.

    When num_clusters <= feature_dim the centers are scaled one-hot axes
    (pairwise squared distance exactly 2 * center_scale**2); otherwise they
    are seeded Gaussian rows with the same expected separation.
    """
    if num_clusters <= feature_dim:
        centers = np.zeros((num_clusters, feature_dim))
        centers[np.arange(num_clusters), np.arange(num_clusters)] = center_scale
        return centers
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC3]))
    return rng.standard_normal((num_clusters, feature_dim)) * (
        center_scale / np.sqrt(feature_dim)
    )


@dataclass
class _State:
    """Backbone state: the input view plus the logits at the current layer."""

    features: np.ndarray
    input_key: int
    affinity: np.ndarray
    layer: int
    logits: np.ndarray


def input_content_key(features: np.ndarray) -> int:
    """Stable input identifier: crc32 of the float32 feature bytes.

    Identical feature vectors share a noise stream, so duplicated examples
    produce identical profiles, and query-time inputs need no dataset id.
    """
    return zlib.crc32(np.ascontiguousarray(features, dtype="<f4").tobytes())


class SyntheticPredictor(LayeredPredictor):
    """LayeredPredictor over a SyntheticModelSpec; pure and reentrant."""

    def __init__(self, spec: SyntheticModelSpec):
        self.spec = spec
        self._class_of_cluster = np.arange(spec.num_clusters) % spec.num_classes

    @property
    def num_layers(self) -> int:
        return self.spec.m

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def _affinity(self, features: np.ndarray) -> np.ndarray:
        diff = self.spec.cluster_centers - features.astype(np.float64)
        per_cluster = -(diff * diff).sum(axis=1)
        logits = np.full(self.spec.num_classes, -np.inf)
        np.maximum.at(logits, self._class_of_cluster, per_cluster)
        return logits

    def _noise(self, input_key: int, layer: int) -> np.ndarray:
        bits = np.random.Philox(
            key=np.uint64(self.spec.seed & 0xFFFFFFFFFFFFFFFF),
            counter=[input_key, layer, 0, 0],
        )
        return np.random.Generator(bits).standard_normal(self.spec.num_classes)

    def embed(self, input) -> tuple[_State, np.ndarray]:
        features = as_key_vector(input, dim=self.spec.feature_dim, name="input")
        affinity = self._affinity(features)
        state = _State(
            features=features,
            input_key=input_content_key(features),
            affinity=affinity,
            layer=0,
            logits=affinity,
        )
        return state, features.copy()

    def forward_layer(self, state: _State, layer: int) -> _State:
        if layer != state.layer + 1:
            raise ValueError(f"layer {layer} called after layer {state.layer}")
        scale = self.spec.layer_noise[layer - 1]
        logits = state.affinity
        if scale > 0.0:
            logits = logits + scale * self._noise(state.input_key, layer)
        return _State(state.features, state.input_key, state.affinity, layer, logits)

    def predict(self, state: _State) -> np.ndarray:
        shifted = state.logits - state.logits.max()
        weights = np.exp(shifted)
        return weights / weights.sum()

    def state_embedding(self, state: _State) -> np.ndarray:
        return state.logits.astype(np.float32)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(
            f"{self.spec.m},{self.spec.num_classes},{self.spec.feature_dim},"
            f"{self.spec.seed},{self.spec.cluster_spread}".encode()
        )
        digest.update(self.spec.cluster_centers.tobytes())
        digest.update(self.spec.layer_noise.tobytes())
        return digest.hexdigest()


def make_synthetic_predictor(spec: SyntheticModelSpec) -> SyntheticPredictor:
    return SyntheticPredictor(spec)


def make_clustered_dataset(
    spec: SyntheticModelSpec, n: int, seed: int
) -> list[LabeledExample]:
    """n examples sampled around the spec's cluster centers, deterministically.

    Clusters are assigned round-robin; features are center + spread * noise
    cast to float32; labels are the cluster's class.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        cluster = i % spec.num_clusters
        offset = spec.cluster_spread * rng.standard_normal(spec.feature_dim)
        features = (spec.cluster_centers[cluster] + offset).astype(np.float32)
        examples.append(
            LabeledExample(id=i, input=features, label=cluster % spec.num_classes)
        )
    return examples


def shannon_entropy(probs: np.ndarray) -> float:
    """Entropy in nats; zero-probability entries contribute zero."""
    probs = np.asarray(probs, dtype=np.float64)
    nonzero = probs[probs > 0.0]
    return float(-(nonzero * np.log(nonzero)).sum())


def entropy_exit_baseline(
    predictor: LayeredPredictor, input, threshold: float
) -> tuple[int, int]:
    """Exit at the first layer whose predictive entropy is <= threshold.

    Returns (predicted_class, exit_layer); runs to the final layer when no
    layer clears the threshold.
    """
    if threshold < 0.0:
        raise ValueError("threshold must be >= 0")
    state, _ = predictor.embed(input)
    probs = None
    for j in range(1, predictor.num_layers + 1):
        state = predictor.forward_layer(state, j)
        probs = np.asarray(predictor.predict(state), dtype=np.float64)
        if shannon_entropy(probs) <= threshold:
            return int(np.argmax(probs)), j
    assert probs is not None
    return int(np.argmax(probs)), predictor.num_layers


def oracle_exit_metrics(
    predictor: LayeredPredictor, dataset: list[LabeledExample]
) -> tuple[CorrectRatioReport, list[tuple[int, ...]]]:
    """Exact per-example sets of correctly-predicting layers, plus the
    recoverable-error summary: among examples wrong at the final layer, the
    fraction for which some earlier layer predicts correctly. The ratio is
    defined as 0 when nothing is wrong at the final layer.
    """
    correct_layer_sets: list[tuple[int, ...]] = []
    n_final_wrong = 0
    n_recoverable = 0
    m = predictor.num_layers
    for example in dataset:
        state, _ = predictor.embed(example.input)
        layers = []
        for j in range(1, m + 1):
            state = predictor.forward_layer(state, j)
            probs = np.asarray(predictor.predict(state), dtype=np.float64)
            if int(np.argmax(probs)) == example.label:
                layers.append(j)
        correct_layer_sets.append(tuple(layers))
        if m not in layers:
            n_final_wrong += 1
            if any(j < m for j in layers):
                n_recoverable += 1
    report = CorrectRatioReport(
        n_final_wrong=n_final_wrong,
        n_recoverable=n_recoverable,
        ratio=n_recoverable / max(n_final_wrong, 1),
    )
    return report, correct_layer_sets


_SPEC_KEYS = (
    "m",
    "num_classes",
    "feature_dim",
    "num_clusters",
    "noise_schedule",
    "seed",
    "cluster_spread",
    "center_scale",
)
_REQUIRED_SPEC_KEYS = ("m", "num_classes", "feature_dim", "num_clusters", "noise_schedule", "seed")


def parse_model_spec_text(text: str) -> SyntheticModelSpec:
    """Parse a flat key/value model spec.

    Required keys: m, num_classes, feature_dim, num_clusters,
    noise_schedule (comma list, one value per layer), seed. Optional:
    cluster_spread, center_scale. Unknown keys are an error; centers are
    derived deterministically via default_centers.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SPEC_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    missing = [key for key in _REQUIRED_SPEC_KEYS if key not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    try:
        m = int(raw["m"])
        num_classes = int(raw["num_classes"])
        feature_dim = int(raw["feature_dim"])
        num_clusters = int(raw["num_clusters"])
        seed = int(raw["seed"])
        noise = np.array([float(x) for x in raw["noise_schedule"].split(",")])
        spread = float(raw.get("cluster_spread", 0.1))
        scale = float(raw.get("center_scale", 2.0))
        centers = default_centers(num_clusters, feature_dim, seed, scale)
        return SyntheticModelSpec(
            m=m,
            num_classes=num_classes,
            feature_dim=feature_dim,
            cluster_centers=centers,
            layer_noise=noise,
            seed=seed,
            cluster_spread=spread,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_model_spec(path) -> SyntheticModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_spec_text(fh.read())
