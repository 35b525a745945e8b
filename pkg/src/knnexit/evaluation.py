"""Evaluation reports and ablation sweeps over a built database.

Latency is reported primarily as layers executed (avg_exit_layer and the
fraction of layers saved), which transfers across hardware; wall time is
carried along as a secondary, non-deterministic field and is excluded
from report comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .collector import EmbeddingSource, LabeledExample, LayeredPredictor, infer_with_exit
from .database import ExitDatabase
from .index import FlatIndex
from .policy import PolicyConfig
from .synthetic import entropy_exit_baseline, oracle_exit_metrics

KNOBS = ("k", "tau", "db_fraction")


class InternalInvariantError(RuntimeError):
    """A computed report violated one of its own consistency invariants."""


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    avg_exit_layer: float
    layers_saved_fraction: float
    correct_ratio: float
    exit_histogram: tuple[float, ...]
    wall_time_ms: float
    config_echo: dict[str, str]

    def to_record(self) -> dict:
        """Flat dict for machine-readable output (full float precision)."""
        return {
            "accuracy": self.accuracy,
            "avg_exit_layer": self.avg_exit_layer,
            "layers_saved_fraction": self.layers_saved_fraction,
            "correct_ratio": self.correct_ratio,
            "exit_histogram": list(self.exit_histogram),
            "wall_time_ms": self.wall_time_ms,
            "config_echo": dict(self.config_echo),
        }


@dataclass(frozen=True)
class AblationRow:
    knob_name: str
    knob_value: float
    metrics: MetricsReport


def _report_from_runs(
    labels: np.ndarray,
    preds: np.ndarray,
    layers: np.ndarray,
    num_layers: int,
    correct_ratio: float,
    wall_time_ms: float,
    config_echo: dict[str, str],
) -> MetricsReport:
    n = labels.shape[0]
    counts = np.bincount(layers, minlength=num_layers + 1)[1:]
    histogram = counts / n
    avg = float(layers.mean())
    hist_sum = float(histogram.sum())
    expectation = float((histogram * np.arange(1, num_layers + 1)).sum())
    if abs(hist_sum - 1.0) > 1e-9:
        raise InternalInvariantError(f"exit histogram sums to {hist_sum!r}, not 1")
    if abs(expectation - avg) > 1e-9:
        raise InternalInvariantError(
            f"histogram expectation {expectation!r} != avg exit layer {avg!r}"
        )
    return MetricsReport(
        accuracy=float((preds == labels).mean()),
        avg_exit_layer=avg,
        layers_saved_fraction=1.0 - avg / num_layers,
        correct_ratio=correct_ratio,
        exit_histogram=tuple(histogram.tolist()),
        wall_time_ms=wall_time_ms,
        config_echo=config_echo,
    )


def _base_echo(cfg: PolicyConfig, metric: str, source: EmbeddingSource, n: int) -> dict[str, str]:
    return {
        "k": str(cfg.k),
        "tau": repr(cfg.tau),
        "epsilon": repr(cfg.epsilon),
        "fallback_layer": str(cfg.fallback_layer),
        "metric": metric,
        "embedding_source": source.describe(),
        "n_eval": str(n),
    }


def evaluate(
    predictor: LayeredPredictor,
    db: ExitDatabase,
    index: FlatIndex,
    dataset: list[LabeledExample],
    cfg: PolicyConfig,
    embedding_source: EmbeddingSource = EmbeddingSource(),
) -> MetricsReport:
    """Run retrieval-guided inference over the dataset and summarize it."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    start = time.perf_counter()
    preds = np.empty(len(dataset), dtype=np.int64)
    layers = np.empty(len(dataset), dtype=np.int64)
    for i, example in enumerate(dataset):
        pred, decision = infer_with_exit(
            predictor, index, db, example.input, cfg, embedding_source
        )
        preds[i] = pred
        layers[i] = decision.layer
    wall_ms = (time.perf_counter() - start) * 1000.0
    report, _ = oracle_exit_metrics(predictor, dataset)
    labels = np.array([ex.label for ex in dataset], dtype=np.int64)
    echo = _base_echo(cfg, index.metric, embedding_source, len(dataset))
    echo["variant"] = "retrieval"
    return _report_from_runs(
        labels, preds, layers, predictor.num_layers, report.ratio, wall_ms, echo
    )


def evaluate_full_model(
    predictor: LayeredPredictor, dataset: list[LabeledExample]
) -> MetricsReport:
    """Reference: always run every layer and predict from the last one."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    m = predictor.num_layers
    start = time.perf_counter()
    preds = np.empty(len(dataset), dtype=np.int64)
    for i, example in enumerate(dataset):
        state, _ = predictor.embed(example.input)
        for j in range(1, m + 1):
            state = predictor.forward_layer(state, j)
        preds[i] = int(np.argmax(np.asarray(predictor.predict(state))))
    wall_ms = (time.perf_counter() - start) * 1000.0
    report, _ = oracle_exit_metrics(predictor, dataset)
    labels = np.array([ex.label for ex in dataset], dtype=np.int64)
    layers = np.full(len(dataset), m, dtype=np.int64)
    echo = {"variant": "full", "n_eval": str(len(dataset))}
    return _report_from_runs(labels, preds, layers, m, report.ratio, wall_ms, echo)


def evaluate_entropy_baseline(
    predictor: LayeredPredictor, dataset: list[LabeledExample], threshold: float
) -> MetricsReport:
    """Comparator: exit at the first layer whose entropy clears the threshold."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    start = time.perf_counter()
    preds = np.empty(len(dataset), dtype=np.int64)
    layers = np.empty(len(dataset), dtype=np.int64)
    for i, example in enumerate(dataset):
        pred, layer = entropy_exit_baseline(predictor, example.input, threshold)
        preds[i] = pred
        layers[i] = layer
    wall_ms = (time.perf_counter() - start) * 1000.0
    report, _ = oracle_exit_metrics(predictor, dataset)
    labels = np.array([ex.label for ex in dataset], dtype=np.int64)
    echo = {
        "variant": "entropy",
        "entropy_threshold": repr(threshold),
        "n_eval": str(len(dataset)),
    }
    return _report_from_runs(
        labels, preds, layers, predictor.num_layers, report.ratio, wall_ms, echo
    )


def subsample_database(db: ExitDatabase, fraction: float, seed: int) -> ExitDatabase:
    """Seeded uniform sample of entries without replacement, ids renumbered.

    The sampled entries keep their original relative order, so fraction 1.0
    reproduces the input database exactly.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(db)
    count = max(1, round(fraction * n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, count]))
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    sub = ExitDatabase(dim=db.dim, num_layers=db.num_layers, metadata=dict(db.metadata))
    for i in chosen:
        sub.add_entry(db.keys[i], db.values[i].records)
    return sub


def ablate(
    predictor: LayeredPredictor,
    db: ExitDatabase,
    dataset: list[LabeledExample],
    knob: str,
    values: list[float],
    cfg: PolicyConfig,
    metric: str = "l2",
    seed: int = 0,
    embedding_source: EmbeddingSource = EmbeddingSource(),
) -> list[AblationRow]:
    """One evaluation row per knob value.

    k and tau rows reuse the full index; db_fraction rows rebuild the index
    over a seeded uniform subsample of the database entries.
    """
    if knob not in KNOBS:
        raise ValueError(f"knob must be one of {KNOBS}, got {knob!r}")
    if not values:
        raise ValueError("values must be non-empty")
    rows = []
    full_index = FlatIndex(metric=metric).fit(db.key_matrix())
    for value in values:
        if knob == "k":
            k = int(value)
            if k != value or k < 1:
                raise ValueError(f"invalid k value {value!r}")
            row_cfg = PolicyConfig(k=k, tau=cfg.tau, epsilon=cfg.epsilon, fallback_layer=cfg.fallback_layer)
            report = evaluate(predictor, db, full_index, dataset, row_cfg, embedding_source)
        elif knob == "tau":
            row_cfg = PolicyConfig(k=cfg.k, tau=float(value), epsilon=cfg.epsilon, fallback_layer=cfg.fallback_layer)
            report = evaluate(predictor, db, full_index, dataset, row_cfg, embedding_source)
        else:
            sub = subsample_database(db, float(value), seed)
            sub_index = FlatIndex(metric=metric).fit(sub.key_matrix())
            report = evaluate(predictor, sub, sub_index, dataset, cfg, embedding_source)
        rows.append(AblationRow(knob_name=knob, knob_value=float(value), metrics=report))
    return rows
