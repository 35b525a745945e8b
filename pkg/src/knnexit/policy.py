"""Exit-layer selection from retrieved neighbor profiles.

Given the k nearest stored profiles, each neighbor is weighted by the
ratio of the smallest retrieved distance to its own distance, every
record whose confidence clears the threshold contributes weight * prob
to its layer's mass, and the earliest layer attaining the maximum mass
is selected. All-zero mass falls back to a configured layer (by default
the final one, i.e. full inference).

Everything here is a pure function of its inputs; mass is accumulated in
float64 and left unnormalized because only its argmax matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .database import ExitDatabase, ExitProfile
from .errors import ConfigError
from .index import METRICS, FlatIndex, NeighborHit


@dataclass(frozen=True)
class PolicyConfig:
    """Decision knobs: retrieval count k, confidence threshold tau,
    distance clamp epsilon, and the layer used when no mass survives.

    tau may exceed 1.0; since stored confidences never do, that forces
    the fallback and degenerates the pipeline to full inference.
    """

    k: int = 12
    tau: float = 0.9
    epsilon: float = 1e-12
    fallback_layer: int | str = "final"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.tau < 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if isinstance(self.fallback_layer, str) and self.fallback_layer != "final":
            raise ValueError(f"fallback_layer must be an int or 'final', got {self.fallback_layer!r}")

    def resolve_fallback(self, num_layers: int) -> int:
        if self.fallback_layer == "final":
            return num_layers
        layer = int(self.fallback_layer)
        if not 1 <= layer <= num_layers:
            raise ValueError(f"fallback_layer {layer} out of range [1, {num_layers}]")
        return layer


@dataclass(frozen=True)
class ExitDecision:
    """Selected exit layer plus the evidence behind it."""

    layer: int
    mass: np.ndarray
    hits: tuple[NeighborHit, ...]
    fallback_used: bool


def neighbor_weights(hits: list[NeighborHit], epsilon: float) -> np.ndarray:
    """Weight each hit by min(clamped distances) / its clamped distance.

    Distances are clamped below at epsilon before the ratio, so a zero
    distance (exact key match) still yields a defined weight of 1. The
    nearest hit always gets weight exactly 1; all weights lie in (0, 1].
    """
    if not hits:
        raise ValueError("hits must be non-empty")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    dists = np.array([h.distance for h in hits], dtype=np.float64)
    if np.any(dists < 0.0) or not np.isfinite(dists).all():
        raise ValueError("distances must be finite and non-negative")
    clamped = np.maximum(dists, epsilon)
    return clamped.min() / clamped


def exit_mass(
    profiles: list[ExitProfile],
    weights,
    tau: float,
    num_layers: int,
) -> np.ndarray:
    """Accumulate per-layer mass over neighbors.

    mass[l-1] = sum_i weight_i * p_i(l) for every neighbor i whose profile
    records layer l with confidence p_i(l) >= tau. Each neighbor holds at
    most one record per layer, so it contributes at most one term per layer.
    The comparison is >=: a confidence exactly equal to tau passes.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(profiles) != weights.shape[0]:
        raise ValueError(
            f"got {len(profiles)} profiles but {weights.shape[0]} weights"
        )
    mass = np.zeros(num_layers, dtype=np.float64)
    for profile, weight in zip(profiles, weights):
        for rec in profile.records:
            if not 1 <= rec.layer <= num_layers:
                raise ValueError(
                    f"record layer {rec.layer} outside [1, {num_layers}]"
                )
            if rec.prob >= tau:
                mass[rec.layer - 1] += weight * rec.prob
    return mass


def select_exit_layer(mass, fallback_layer: int) -> tuple[int, bool]:
    """Earliest argmax of the mass vector, or the fallback when all-zero."""
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim != 1 or mass.shape[0] == 0:
        raise ValueError("mass must be a non-empty 1-D vector")
    if mass.max() > 0.0:
        # np.argmax returns the first maximum, i.e. the earliest layer
        return int(np.argmax(mass)) + 1, False
    return fallback_layer, True


def decide(index: FlatIndex, db: ExitDatabase, q, cfg: PolicyConfig) -> ExitDecision:
    """Full decision chain: retrieve, weight, accumulate, select."""
    hits = index.query(q, cfg.k)
    weights = neighbor_weights(hits, cfg.epsilon)
    profiles = [db.get_profile(h.entry_id) for h in hits]
    mass = exit_mass(profiles, weights, cfg.tau, db.num_layers)
    layer, fallback_used = select_exit_layer(mass, cfg.resolve_fallback(db.num_layers))
    return ExitDecision(layer=layer, mass=mass, hits=tuple(hits), fallback_used=fallback_used)


_CONFIG_KEYS = ("k", "tau", "epsilon", "metric", "fallback_layer")


def parse_config_text(text: str) -> tuple[PolicyConfig, str]:
    """Parse a flat key/value config; returns (PolicyConfig, metric).

    Recognized keys: k, tau, epsilon, metric, fallback_layer. Lines are
    `key = value`; blank lines and `#` comments are ignored. Unknown keys
    are an error.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    metric = raw.get("metric", "l2")
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
    fallback: int | str = raw.get("fallback_layer", "final")
    if fallback != "final":
        fallback = int(fallback)
    try:
        cfg = PolicyConfig(
            k=int(raw.get("k", 12)),
            tau=float(raw.get("tau", 0.9)),
            epsilon=float(raw.get("epsilon", 1e-12)),
            fallback_layer=fallback,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, metric


def load_config(path) -> tuple[PolicyConfig, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
