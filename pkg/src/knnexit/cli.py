"""Command-line surface: build databases, evaluate, sweep ablations, generate data.

Subcommands:
    build    collect exit profiles for a dataset and write a database file
    eval     run retrieval-guided early-exit inference and report metrics
    ablate   sweep one knob (k, tau, db_fraction) over a list of values
    simgen   write seeded synthetic train/eval dataset files

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation. Reports are printed either as a human-readable table
(4 decimals) or as machine-readable JSON lines with full float precision.
"""

from __future__ import annotations

import argparse
import json
import sys

from .collector import EmbeddingSource, build_database
from .database import DatabaseStats, load as load_db, save as save_db
from .datasets import read_dataset, write_dataset
from .errors import ConfigError, FormatError
from .evaluation import (
    KNOBS,
    AblationRow,
    InternalInvariantError,
    MetricsReport,
    ablate,
    evaluate,
    evaluate_entropy_baseline,
    evaluate_full_model,
)
from .index import METRICS, FlatIndex
from .policy import PolicyConfig, load_config
from .synthetic import (
    SyntheticModelSpec,
    load_model_spec,
    make_clustered_dataset,
    make_synthetic_predictor,
    parse_model_spec_text,
)

MODEL_SPEC_KEY = "model_spec"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse errors to exit code 1
        raise _UsageError(f"{self.prog}: {message}")


def _emit(line: str) -> None:
    sys.stdout.write(line + "\n")


def _print_metrics(report: MetricsReport, fmt: str, label: str) -> None:
    if fmt == "records":
        record = {"record": "metrics", "variant": label}
        record.update(report.to_record())
        _emit(json.dumps(record, sort_keys=True))
        return
    _emit(f"== {label} ==")
    _emit(f"accuracy               {report.accuracy:.4f}")
    _emit(f"avg_exit_layer         {report.avg_exit_layer:.4f}")
    _emit(f"layers_saved_fraction  {report.layers_saved_fraction:.4f}")
    _emit(f"correct_ratio          {report.correct_ratio:.4f}")
    _emit(f"wall_time_ms           {report.wall_time_ms:.4f}")
    _emit("exit_histogram         " + " ".join(f"{p:.4f}" for p in report.exit_histogram))


def _print_stats(stats: DatabaseStats, fmt: str) -> None:
    if fmt == "records":
        _emit(
            json.dumps(
                {
                    "record": "database_stats",
                    "n_entries": stats.n_entries,
                    "mean_profile_len": stats.mean_profile_len,
                    "empty_profile_fraction": stats.empty_profile_fraction,
                    "per_layer_counts": list(stats.per_layer_counts),
                },
                sort_keys=True,
            )
        )
        return
    _emit(f"n_entries               {stats.n_entries}")
    _emit(f"mean_profile_len        {stats.mean_profile_len:.4f}")
    _emit(f"empty_profile_fraction  {stats.empty_profile_fraction:.4f}")
    _emit("per_layer_counts        " + " ".join(str(c) for c in stats.per_layer_counts))


def _print_ablation(rows: list[AblationRow], fmt: str) -> None:
    if fmt == "records":
        for row in rows:
            record = {
                "record": "ablation",
                "knob_name": row.knob_name,
                "knob_value": row.knob_value,
            }
            record.update(row.metrics.to_record())
            _emit(json.dumps(record, sort_keys=True))
        return
    knob = rows[0].knob_name
    _emit(f"{knob:>12}  accuracy  avg_exit  saved_frac  correct_ratio")
    for row in rows:
        m = row.metrics
        _emit(
            f"{row.knob_value:>12.4f}  {m.accuracy:8.4f}  {m.avg_exit_layer:8.4f}"
            f"  {m.layers_saved_fraction:10.4f}  {m.correct_ratio:13.4f}"
        )


def _policy_from_args(args) -> PolicyConfig:
    if args.config is not None:
        cfg, metric = load_config(args.config)
        k = cfg.k if args.k is None else args.k
        tau = cfg.tau if args.tau is None else args.tau
        epsilon = cfg.epsilon if args.epsilon is None else args.epsilon
        fallback = cfg.fallback_layer if args.fallback is None else _parse_fallback(args.fallback)
        if args.metric is None:
            args.metric = metric
    else:
        k = 12 if args.k is None else args.k
        tau = 0.9 if args.tau is None else args.tau
        epsilon = 1e-12 if args.epsilon is None else args.epsilon
        fallback = "final" if args.fallback is None else _parse_fallback(args.fallback)
    if args.metric is None:
        args.metric = "l2"
    return PolicyConfig(k=k, tau=tau, epsilon=epsilon, fallback_layer=fallback)


def _parse_fallback(value: str) -> int | str:
    if value == "final":
        return "final"
    try:
        return int(value)
    except ValueError:
        raise _UsageError(f"--fallback must be 'final' or an integer, got {value!r}")


def _parse_values(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise _UsageError(f"--values must be a comma list of numbers, got {text!r}")


def _load_db_and_model(db_path):
    db = load_db(db_path)
    spec_text = db.metadata.get(MODEL_SPEC_KEY)
    if spec_text is None:
        raise FormatError(f"database {db_path} carries no {MODEL_SPEC_KEY} metadata")
    spec = parse_model_spec_text(spec_text)
    source_desc = db.metadata.get("embedding_source", "backbone-layer:0")
    if source_desc == "external-encoder":
        raise FormatError(
            "database was built with an external encoder; CLI evaluation "
            "supports backbone-layer sources only"
        )
    layer = int(source_desc.split(":", 1)[1])
    return db, spec, make_synthetic_predictor(spec), EmbeddingSource(backbone_layer=layer)


def _check_compat(db, spec: SyntheticModelSpec, examples, num_classes: int, source: EmbeddingSource) -> None:
    if spec.m != db.num_layers:
        raise FormatError(f"model has {spec.m} layers but database has {db.num_layers}")
    if num_classes != spec.num_classes:
        raise FormatError(
            f"dataset has {num_classes} classes but model has {spec.num_classes}"
        )
    feature_dim = len(examples[0].input)
    if feature_dim != spec.feature_dim:
        raise FormatError(
            f"dataset feature_dim {feature_dim} != model feature_dim {spec.feature_dim}"
        )
    expected_dim = spec.feature_dim if source.backbone_layer == 0 else spec.num_classes
    if db.dim != expected_dim:
        raise FormatError(f"database dim {db.dim} != expected key dim {expected_dim}")


def cmd_build(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec_text = fh.read()
    spec = parse_model_spec_text(spec_text)
    examples, num_classes = read_dataset(args.dataset)
    if num_classes != spec.num_classes:
        raise FormatError(
            f"dataset has {num_classes} classes but model has {spec.num_classes}"
        )
    predictor = make_synthetic_predictor(spec)
    source = EmbeddingSource(backbone_layer=args.embedding_layer)
    db = build_database(predictor, examples, source)
    db.metadata[MODEL_SPEC_KEY] = spec_text
    save_db(db, args.out)
    _print_stats(db.stats(), args.format)
    return 0


def cmd_eval(args) -> int:
    cfg = _policy_from_args(args)
    db, spec, predictor, source = _load_db_and_model(args.db)
    examples, num_classes = read_dataset(args.dataset)
    _check_compat(db, spec, examples, num_classes, source)
    index = FlatIndex(metric=args.metric).fit(db.key_matrix())
    report = evaluate(predictor, db, index, examples, cfg, source)
    _print_metrics(report, args.format, "retrieval")
    if args.baseline == "entropy":
        baseline = evaluate_entropy_baseline(predictor, examples, args.entropy_threshold)
        _print_metrics(baseline, args.format, "entropy")
    elif args.baseline == "full":
        baseline = evaluate_full_model(predictor, examples)
        _print_metrics(baseline, args.format, "full")
    return 0


def cmd_ablate(args) -> int:
    cfg = _policy_from_args(args)
    values = _parse_values(args.values)
    if not values:
        raise _UsageError("--values must contain at least one number")
    if args.knob == "k" and any(v != int(v) or v < 1 for v in values):
        raise _UsageError(f"k values must be positive integers, got {values}")
    if args.knob == "db_fraction" and any(not 0.0 < v <= 1.0 for v in values):
        raise _UsageError(f"db_fraction values must be in (0, 1], got {values}")
    db, spec, predictor, source = _load_db_and_model(args.db)
    examples, num_classes = read_dataset(args.dataset)
    _check_compat(db, spec, examples, num_classes, source)
    rows = ablate(
        predictor, db, examples, args.knob, values, cfg,
        metric=args.metric, seed=args.seed, embedding_source=source,
    )
    _print_ablation(rows, args.format)
    return 0


def cmd_simgen(args) -> int:
    if args.train < 1:
        raise _UsageError("--train must be >= 1")
    if args.eval < 1:
        raise _UsageError("--eval must be >= 1")
    spec = load_model_spec(args.spec)
    train_seed = args.seed if args.train_seed is None else args.train_seed
    eval_seed = args.seed + 1 if args.eval_seed is None else args.eval_seed
    train = make_clustered_dataset(spec, args.train, train_seed)
    eval_split = make_clustered_dataset(spec, args.eval, eval_seed)
    train_path = f"{args.out_prefix}.train.ds"
    eval_path = f"{args.out_prefix}.eval.ds"
    write_dataset(train_path, train, spec.num_classes)
    write_dataset(eval_path, eval_split, spec.num_classes)
    _emit(train_path)
    _emit(eval_path)
    return 0


def _add_policy_flags(sub) -> None:
    sub.add_argument("--k", type=int, default=None, help="retrieved neighbors (default 12)")
    sub.add_argument("--tau", type=float, default=None, help="confidence threshold (default 0.9)")
    sub.add_argument("--epsilon", type=float, default=None, help="distance clamp (default 1e-12)")
    sub.add_argument("--metric", choices=METRICS, default=None, help="index metric (default l2)")
    sub.add_argument("--fallback", default=None, help="'final' or a layer index (default final)")
    sub.add_argument("--config", default=None, help="flat key/value policy config file")


def build_parser() -> _Parser:
    parser = _Parser(prog="knnexit", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    build = subs.add_parser("build", help="collect profiles and write a database file")
    build.add_argument("--spec", required=True, help="synthetic model spec file")
    build.add_argument("--dataset", required=True, help="RAEEDS01 training dataset")
    build.add_argument("--out", required=True, help="output database path")
    build.add_argument("--embedding-layer", type=int, default=0,
                       help="backbone layer used as retrieval key (0 = embedding output)")
    build.add_argument("--format", choices=("table", "records"), default="table")
    build.set_defaults(func=cmd_build)

    ev = subs.add_parser("eval", help="evaluate retrieval-guided early exit")
    ev.add_argument("--db", required=True)
    ev.add_argument("--dataset", required=True)
    _add_policy_flags(ev)
    ev.add_argument("--baseline", choices=("none", "entropy", "full"), default="none")
    ev.add_argument("--entropy-threshold", type=float, default=0.05)
    ev.add_argument("--format", choices=("table", "records"), default="table")
    ev.set_defaults(func=cmd_eval)

    ab = subs.add_parser("ablate", help="sweep one knob over a list of values")
    ab.add_argument("--db", required=True)
    ab.add_argument("--dataset", required=True)
    ab.add_argument("--knob", choices=KNOBS, required=True)
    ab.add_argument("--values", required=True, help="comma list, e.g. 0.2,0.5,1.0")
    ab.add_argument("--seed", type=int, default=0, help="seed for db_fraction sampling")
    _add_policy_flags(ab)
    ab.add_argument("--format", choices=("table", "records"), default="table")
    ab.set_defaults(func=cmd_ablate)

    sg = subs.add_parser("simgen", help="generate seeded synthetic dataset files")
    sg.add_argument("--spec", required=True)
    sg.add_argument("--train", type=int, required=True, help="training example count")
    sg.add_argument("--eval", type=int, required=True, help="eval example count")
    sg.add_argument("--seed", type=int, default=0, help="base data seed")
    sg.add_argument("--train-seed", type=int, default=None)
    sg.add_argument("--eval-seed", type=int, default=None)
    sg.add_argument("--out-prefix", required=True)
    sg.set_defaults(func=cmd_simgen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ConfigError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InternalInvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
