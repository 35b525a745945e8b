import json

import pytest

from knnexit.cli import main
from knnexit.database import load as load_db
from knnexit.datasets import read_dataset


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def records(out):
    return [json.loads(line) for line in out.strip().splitlines()]


def drop_wall_time(record):
    record = dict(record)
    record.pop("wall_time_ms", None)
    return record


@pytest.fixture()
def workdir(tmp_path, corrective_spec_path, capsys):
    spec = tmp_path / "model.spec"
    spec.write_text(corrective_spec_path.read_text())
    code, out, err = run(
        capsys, "simgen", "--spec", str(spec), "--train", "60", "--eval", "40",
        "--seed", "3", "--out-prefix", str(tmp_path / "sim"),
    )
    assert code == 0, err
    return {
        "spec": spec,
        "train": tmp_path / "sim.train.ds",
        "eval": tmp_path / "sim.eval.ds",
        "db": tmp_path / "model.db",
        "tmp": tmp_path,
    }


def build(capsys, paths, fmt="table"):
    return run(
        capsys, "build", "--spec", str(paths["spec"]), "--dataset", str(paths["train"]),
        "--out", str(paths["db"]), "--format", fmt,
    )


def test_simgen_writes_loadable_files(workdir):
    train, num_classes = read_dataset(workdir["train"])
    eval_split, _ = read_dataset(workdir["eval"])
    assert len(train) == 60
    assert len(eval_split) == 40
    assert num_classes == 4


def test_simgen_deterministic(workdir, tmp_path, capsys):
    code, _, _ = run(
        capsys, "simgen", "--spec", str(workdir["spec"]), "--train", "60", "--eval", "40",
        "--seed", "3", "--out-prefix", str(tmp_path / "again"),
    )
    assert code == 0
    assert (tmp_path / "again.train.ds").read_bytes() == workdir["train"].read_bytes()
    assert (tmp_path / "again.eval.ds").read_bytes() == workdir["eval"].read_bytes()


def test_simgen_zero_train_is_usage_error(workdir, capsys):
    code, _, err = run(
        capsys, "simgen", "--spec", str(workdir["spec"]), "--train", "0", "--eval", "5",
        "--out-prefix", str(workdir["tmp"] / "zero"),
    )
    assert code == 1
    assert "--train" in err


def test_build_writes_round_trippable_db(workdir, capsys):
    code, out, err = build(capsys, workdir)
    assert code == 0, err
    db = load_db(workdir["db"])
    assert len(db) == 60
    assert "model_spec" in db.metadata
    assert "n_entries" in out


def test_build_missing_dataset_names_path(workdir, capsys):
    missing = workdir["tmp"] / "nope.ds"
    code, _, err = run(
        capsys, "build", "--spec", str(workdir["spec"]), "--dataset", str(missing),
        "--out", str(workdir["db"]),
    )
    assert code == 2
    assert "nope.ds" in err


def test_build_rebuild_is_byte_identical(workdir, capsys):
    build(capsys, workdir)
    first = workdir["db"].read_bytes()
    build(capsys, workdir)
    assert workdir["db"].read_bytes() == first


def test_build_records_format(workdir, capsys):
    code, out, _ = build(capsys, workdir, fmt="records")
    assert code == 0
    (stats,) = records(out)
    assert stats["record"] == "database_stats"
    assert stats["n_entries"] == 60
    assert len(stats["per_layer_counts"]) == 6


def test_eval_table_output(workdir, capsys):
    build(capsys, workdir)
    code, out, err = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
    )
    assert code == 0, err
    assert "accuracy" in out
    assert "avg_exit_layer" in out


def test_eval_records_with_full_baseline(workdir, capsys):
    build(capsys, workdir)
    code, out, _ = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--format", "records", "--baseline", "full", "--tau", "1.5",
    )
    assert code == 0
    recs = records(out)
    assert [r["variant"] for r in recs] == ["retrieval", "full"]
    # tau > 1 forces the fallback: exactly full-model behaviour
    assert recs[0]["avg_exit_layer"] == 6.0
    assert recs[0]["accuracy"] == recs[1]["accuracy"]


def test_eval_entropy_baseline_variant(workdir, capsys):
    build(capsys, workdir)
    code, out, _ = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--format", "records", "--baseline", "entropy", "--entropy-threshold", "0.2",
    )
    assert code == 0
    recs = records(out)
    assert [r["variant"] for r in recs] == ["retrieval", "entropy"]
    assert recs[1]["config_echo"]["entropy_threshold"] == "0.2"


def test_eval_incompatible_dataset_fails_before_inference(workdir, tmp_path, capsys):
    build(capsys, workdir)
    other_spec = tmp_path / "other.spec"
    other_spec.write_text(
        "m = 6\nnum_classes = 4\nfeature_dim = 5\nnum_clusters = 4\n"
        "noise_schedule = 0,0,0,0,0,0\nseed = 1\n"
    )
    run(
        capsys, "simgen", "--spec", str(other_spec), "--train", "5", "--eval", "5",
        "--out-prefix", str(tmp_path / "other"),
    )
    code, _, err = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(tmp_path / "other.eval.ds"),
    )
    assert code == 2
    assert "feature_dim" in err


def test_eval_bad_db_file(workdir, capsys):
    bad = workdir["tmp"] / "bad.db"
    bad.write_bytes(b"garbage bytes")
    code, _, err = run(capsys, "eval", "--db", str(bad), "--dataset", str(workdir["eval"]))
    assert code == 2
    assert "magic" in err


def test_eval_policy_config_file(workdir, capsys):
    build(capsys, workdir)
    cfg = workdir["tmp"] / "policy.cfg"
    cfg.write_text("k = 3\ntau = 0.8\n")
    code, out, _ = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--config", str(cfg), "--format", "records",
    )
    assert code == 0
    assert records(out)[0]["config_echo"]["k"] == "3"


def test_eval_config_file_unknown_key(workdir, capsys):
    build(capsys, workdir)
    cfg = workdir["tmp"] / "policy.cfg"
    cfg.write_text("k = 3\nwhat = 1\n")
    code, _, err = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--config", str(cfg),
    )
    assert code == 2
    assert "unknown key" in err


def test_ablate_k_sweep_records(workdir, capsys):
    build(capsys, workdir)
    code, out, _ = run(
        capsys, "ablate", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--knob", "k", "--values", "2,4,8,12", "--format", "records",
    )
    assert code == 0
    rows = records(out)
    assert [r["knob_value"] for r in rows] == [2.0, 4.0, 8.0, 12.0]
    assert all(r["record"] == "ablation" for r in rows)


def test_ablate_db_fraction_one_matches_eval(workdir, capsys):
    build(capsys, workdir)
    _, eval_out, _ = run(
        capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--format", "records",
    )
    _, ablate_out, _ = run(
        capsys, "ablate", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--knob", "db_fraction", "--values", "1.0", "--format", "records",
    )
    eval_rec = drop_wall_time(records(eval_out)[0])
    row = drop_wall_time(records(ablate_out)[0])
    for field in ("accuracy", "avg_exit_layer", "exit_histogram", "correct_ratio"):
        assert row[field] == eval_rec[field]


def test_ablate_invalid_values_are_usage_errors(workdir, capsys):
    build(capsys, workdir)
    base = ["ablate", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"])]
    code, _, _ = run(capsys, *base, "--knob", "k", "--values", "2.5")
    assert code == 1
    code, _, _ = run(capsys, *base, "--knob", "db_fraction", "--values", "0.0,1.0")
    assert code == 1
    code, _, _ = run(capsys, *base, "--knob", "k", "--values", "abc")
    assert code == 1
    code, _, _ = run(capsys, *base, "--knob", "gamma", "--values", "1")
    assert code == 1


def test_ablate_table_output(workdir, capsys):
    build(capsys, workdir)
    code, out, _ = run(
        capsys, "ablate", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]),
        "--knob", "tau", "--values", "0.5,0.9",
    )
    assert code == 0
    assert "accuracy" in out
    assert out.count("\n") >= 3


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1


def test_internal_invariant_violation_exits_3(workdir, capsys, monkeypatch):
    import knnexit.cli as cli_mod
    from knnexit.evaluation import InternalInvariantError

    build(capsys, workdir)

    def broken(*args, **kwargs):
        raise InternalInvariantError("histogram does not sum to 1")

    monkeypatch.setattr(cli_mod, "evaluate", broken)
    code, _, err = run(capsys, "eval", "--db", str(workdir["db"]), "--dataset", str(workdir["eval"]))
    assert code == 3
    assert "internal" in err


def test_missing_required_flag_is_usage_error(capsys):
    code, _, _ = run(capsys, "build", "--spec", "x")
    assert code == 1


def test_end_to_end_determinism(tmp_path, corrective_spec_path, capsys):
    # two full simgen -> build -> eval runs in different directories produce
    # identical machine-readable reports except wall_time_ms
    outputs = []
    for name in ("run_a", "run_b"):
        base = tmp_path / name
        base.mkdir()
        spec = base / "model.spec"
        spec.write_text(corrective_spec_path.read_text())
        assert run(
            capsys, "simgen", "--spec", str(spec), "--train", "80", "--eval", "50",
            "--seed", "12", "--out-prefix", str(base / "sim"),
        )[0] == 0
        assert run(
            capsys, "build", "--spec", str(spec), "--dataset", str(base / "sim.train.ds"),
            "--out", str(base / "model.db"), "--format", "records",
        )[0] == 0
        code, out, _ = run(
            capsys, "eval", "--db", str(base / "model.db"),
            "--dataset", str(base / "sim.eval.ds"),
            "--format", "records", "--baseline", "entropy",
        )
        assert code == 0
        outputs.append([drop_wall_time(r) for r in records(out)])
    assert outputs[0] == outputs[1]
