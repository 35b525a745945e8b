import numpy as np
import pytest

from knnexit.collector import LabeledExample, LayeredPredictor
from knnexit.errors import ConfigError
from knnexit.synthetic import (
    SyntheticModelSpec,
    default_centers,
    entropy_exit_baseline,
    input_content_key,
    make_clustered_dataset,
    make_synthetic_predictor,
    oracle_exit_metrics,
    parse_model_spec_text,
    shannon_entropy,
    load_model_spec,
)


def spec_with_noise(noise, num_classes=3, feature_dim=5, seed=11, spread=0.1):
    return SyntheticModelSpec(
        m=len(noise),
        num_classes=num_classes,
        feature_dim=feature_dim,
        cluster_centers=default_centers(num_classes, feature_dim, seed, center_scale=2.0),
        layer_noise=np.array(noise, dtype=float),
        seed=seed,
        cluster_spread=spread,
    )


def layer_accuracy(predictor, dataset, layer):
    correct = 0
    for ex in dataset:
        state, _ = predictor.embed(ex.input)
        for j in range(1, layer + 1):
            state = predictor.forward_layer(state, j)
        if int(np.argmax(predictor.predict(state))) == ex.label:
            correct += 1
    return correct / len(dataset)


def test_noiseless_center_input_always_correct():
    spec = spec_with_noise([0.0, 0.0, 0.0])
    predictor = make_synthetic_predictor(spec)
    for cluster in range(spec.num_clusters):
        center = spec.cluster_centers[cluster].astype(np.float32)
        state, _ = predictor.embed(center)
        for j in range(1, spec.m + 1):
            state = predictor.forward_layer(state, j)
            probs = predictor.predict(state)
            assert int(np.argmax(probs)) == cluster % spec.num_classes
            assert probs.max() > 1.0 / spec.num_classes


def test_same_spec_and_input_bit_identical():
    spec = spec_with_noise([1.0, 0.5, 0.0])
    predictor = make_synthetic_predictor(spec)
    x = np.float32([0.3, -0.2, 1.0, 0.0, 0.5])

    def run():
        state, _ = predictor.embed(x)
        logits = []
        for j in range(1, spec.m + 1):
            state = predictor.forward_layer(state, j)
            logits.append(state.logits.copy())
        return logits

    for a, b in zip(run(), run()):
        assert (a == b).all()


def test_fresh_predictor_reproduces_outputs():
    spec = spec_with_noise([1.5, 0.0])
    x = np.float32([1.0, 0.0, 0.0, 0.0, 0.0])
    outs = []
    for _ in range(2):
        predictor = make_synthetic_predictor(spec)
        state, _ = predictor.embed(x)
        state = predictor.forward_layer(state, 1)
        outs.append(predictor.predict(state))
    assert (outs[0] == outs[1]).all()


def test_noisy_first_layer_less_accurate_than_clean_last():
    spec = spec_with_noise([10.0, 0.0], spread=0.2)
    predictor = make_synthetic_predictor(spec)
    dataset = make_clustered_dataset(spec, 500, seed=21)
    assert layer_accuracy(predictor, dataset, 1) < layer_accuracy(predictor, dataset, 2)


def test_monotone_quality_regime():
    # non-increasing noise ending at zero: the full model is at least as
    # accurate as any fixed single layer, within a 2-point Monte Carlo margin
    spec = spec_with_noise([3.0, 1.5, 0.5, 0.0], spread=0.3)
    predictor = make_synthetic_predictor(spec)
    dataset = make_clustered_dataset(spec, 500, seed=33)
    full = layer_accuracy(predictor, dataset, spec.m)
    for j in range(1, spec.m + 1):
        assert full >= layer_accuracy(predictor, dataset, j) - 0.02


def test_forward_layer_order_enforced():
    spec = spec_with_noise([0.0, 0.0])
    predictor = make_synthetic_predictor(spec)
    state, _ = predictor.embed(np.zeros(5, dtype=np.float32))
    with pytest.raises(ValueError, match="after layer"):
        predictor.forward_layer(state, 2)


def test_input_content_key_matches_duplicates():
    a = np.float32([1.0, 2.0, 3.0])
    assert input_content_key(a) == input_content_key(a.copy())
    assert input_content_key(a) != input_content_key(np.float32([1.0, 2.0, 3.5]))


def test_clustered_dataset_shapes_and_labels():
    spec = spec_with_noise([0.0], num_classes=2, feature_dim=4)
    dataset = make_clustered_dataset(spec, 10, seed=1)
    assert len(dataset) == 10
    assert {ex.label for ex in dataset} == {0, 1}
    assert all(ex.input.dtype == np.float32 for ex in dataset)
    assert [ex.id for ex in dataset] == list(range(10))


def test_clustered_dataset_zero_spread_hits_centers():
    spec = spec_with_noise([0.0], spread=0.0)
    dataset = make_clustered_dataset(spec, 6, seed=4)
    for i, ex in enumerate(dataset):
        center = spec.cluster_centers[i % spec.num_clusters].astype(np.float32)
        assert (ex.input == center).all()


def test_clustered_dataset_seed_determinism():
    spec = spec_with_noise([0.0])
    a = make_clustered_dataset(spec, 25, seed=9)
    b = make_clustered_dataset(spec, 25, seed=9)
    for x, y in zip(a, b):
        assert (x.input == y.input).all() and x.label == y.label
    c = make_clustered_dataset(spec, 25, seed=10)
    assert any((x.input != y.input).any() for x, y in zip(a, c))


def test_entropy_baseline_huge_threshold_exits_first_layer():
    spec = spec_with_noise([1.0, 0.5, 0.0])
    predictor = make_synthetic_predictor(spec)
    x = make_clustered_dataset(spec, 1, seed=2)[0].input
    _, layer = entropy_exit_baseline(predictor, x, threshold=1e9)
    assert layer == 1


def test_entropy_baseline_zero_threshold_runs_to_final_layer():
    spec = spec_with_noise([1.0, 0.5, 0.3])
    predictor = make_synthetic_predictor(spec)
    x = make_clustered_dataset(spec, 1, seed=2)[0].input
    pred, layer = entropy_exit_baseline(predictor, x, threshold=0.0)
    assert layer == spec.m
    state, _ = predictor.embed(x)
    for j in range(1, spec.m + 1):
        state = predictor.forward_layer(state, j)
    assert pred == int(np.argmax(predictor.predict(state)))


def test_entropy_baseline_zero_threshold_matches_full_model_everywhere():
    spec = spec_with_noise([2.0, 1.0, 0.5], spread=0.4)
    predictor = make_synthetic_predictor(spec)
    for ex in make_clustered_dataset(spec, 100, seed=14):
        pred, layer = entropy_exit_baseline(predictor, ex.input, threshold=0.0)
        state, _ = predictor.embed(ex.input)
        for j in range(1, spec.m + 1):
            state = predictor.forward_layer(state, j)
        assert layer == spec.m
        assert pred == int(np.argmax(predictor.predict(state)))


def test_entropy_baseline_boundary_is_inclusive():
    # an input equidistant from both centers yields an exactly uniform
    # distribution; entropy == threshold must exit (comparison is <=)
    spec = spec_with_noise([0.0, 0.0], num_classes=2, feature_dim=4)
    midpoint = spec.cluster_centers.mean(axis=0).astype(np.float32)
    predictor = make_synthetic_predictor(spec)
    state, _ = predictor.embed(midpoint)
    state = predictor.forward_layer(state, 1)
    probs = predictor.predict(state)
    assert probs.tolist() == [0.5, 0.5]
    _, layer = entropy_exit_baseline(predictor, midpoint, threshold=shannon_entropy(probs))
    assert layer == 1


def test_entropy_baseline_threshold_validation():
    spec = spec_with_noise([0.0])
    with pytest.raises(ValueError):
        entropy_exit_baseline(make_synthetic_predictor(spec), np.zeros(5, np.float32), -1.0)


def test_oracle_metrics_noiseless_ratio_zero():
    spec = spec_with_noise([0.0, 0.0], spread=0.1)
    predictor = make_synthetic_predictor(spec)
    dataset = make_clustered_dataset(spec, 50, seed=3)
    report, layer_sets = oracle_exit_metrics(predictor, dataset)
    assert report.n_final_wrong == 0
    assert report.ratio == 0.0
    assert all(layers == (1, 2) for layers in layer_sets)


class TwoExamplePredictor(LayeredPredictor):
    """m=2 truth table: example 0 is wrong then correct, example 1 the reverse."""

    outcomes = {0: [[0.9, 0.1], [0.2, 0.8]], 1: [[0.1, 0.9], [0.8, 0.2]]}

    @property
    def num_layers(self):
        return 2

    @property
    def num_classes(self):
        return 2

    def embed(self, input):
        return (int(input), 0), np.float32([float(input)])

    def forward_layer(self, state, layer):
        return (state[0], layer)

    def predict(self, state):
        return np.array(self.outcomes[state[0]][state[1] - 1])


def test_oracle_metrics_hand_built_truth_table():
    dataset = [LabeledExample(0, 0, 1), LabeledExample(1, 1, 1)]
    report, layer_sets = oracle_exit_metrics(TwoExamplePredictor(), dataset)
    assert layer_sets == [(2,), (1,)]
    assert report.n_final_wrong == 1
    assert report.n_recoverable == 1
    assert report.ratio == 1.0


def test_spec_validation_errors():
    with pytest.raises(ValueError, match="per class"):
        SyntheticModelSpec(2, 4, 3, np.zeros((2, 3)), np.zeros(2), 0)
    with pytest.raises(ValueError, match="layer_noise"):
        spec = spec_with_noise([0.0])
        SyntheticModelSpec(2, 3, 5, spec.cluster_centers, np.zeros(1), 0)
    with pytest.raises(ValueError, match="non-negative"):
        spec_with_noise([-1.0])


def test_default_centers_one_hot_geometry():
    centers = default_centers(3, 5, seed=0, center_scale=1.5)
    for i in range(3):
        for j in range(i + 1, 3):
            gap = ((centers[i] - centers[j]) ** 2).sum()
            assert gap == pytest.approx(2 * 1.5**2)


def test_default_centers_many_clusters_deterministic():
    a = default_centers(10, 4, seed=3)
    b = default_centers(10, 4, seed=3)
    assert (a == b).all()
    assert a.shape == (10, 4)


SPEC_TEXT = """
# synthetic backbone
m = 3
num_classes = 2
feature_dim = 4
num_clusters = 2
noise_schedule = 1.0, 0.5, 0.0
seed = 42
cluster_spread = 0.2
center_scale = 1.5
"""


def test_parse_model_spec_text():
    spec = parse_model_spec_text(SPEC_TEXT)
    assert spec.m == 3
    assert spec.num_classes == 2
    assert spec.layer_noise.tolist() == [1.0, 0.5, 0.0]
    assert spec.cluster_spread == 0.2
    assert (spec.cluster_centers == default_centers(2, 4, 42, 1.5)).all()


def test_parse_model_spec_missing_and_unknown_keys():
    with pytest.raises(ConfigError, match="missing required"):
        parse_model_spec_text("m = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_model_spec_text(SPEC_TEXT + "extra = 1\n")


def test_parse_model_spec_wrong_schedule_length():
    bad = SPEC_TEXT.replace("1.0, 0.5, 0.0", "1.0, 0.5")
    with pytest.raises(ConfigError, match="length"):
        parse_model_spec_text(bad)


def test_load_model_spec_file(tmp_path):
    path = tmp_path / "model.spec"
    path.write_text(SPEC_TEXT)
    spec = load_model_spec(path)
    assert spec.seed == 42
