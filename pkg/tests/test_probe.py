import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hssl.errors import ContractError, DimensionError, ParameterError
from hssl.probe import (FeatureMatrix, alpha_sweep, blend_representations, knn_probe,
                        linear_probe, source_pipeline)


def brute_force_knn(train, test, k, temperature):
    """Row-by-row reference: sort by (-cosine, index), weighted vote, smallest class wins ties."""
    tr = [r / max(np.linalg.norm(r), 1e-12) for r in train.rows]
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    preds = []
    for q in test.rows:
        q = q / max(np.linalg.norm(q), 1e-12)
        sims = [float(q @ r) for r in tr]
        ranked = sorted(range(len(tr)), key=lambda j: (-sims[j], j))[:k]
        votes = [0.0] * num_classes
        for j in ranked:
            votes[train.labels[j]] += np.exp(sims[j] / temperature)
        preds.append(max(range(num_classes), key=lambda c: (votes[c], -c)))
    return np.array(preds)


def random_features(rng, n, d, classes=4):
    return FeatureMatrix(rng.standard_normal((n, d)), rng.integers(0, classes, n))


def test_knn_matches_brute_force_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 200))
        train, test = random_features(rng, n, 6), random_features(rng, 40, 6)
        k = int(rng.integers(1, min(n, 20)))
        got = knn_probe(train, test, k=k, temperature=0.07, chunk=7).predictions
        np.testing.assert_array_equal(got, brute_force_knn(train, test, k, 0.07))


def test_knn_tie_breaks():
    # equidistant neighbours: the earlier training row wins rank, the smaller class wins the vote
    train = FeatureMatrix(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([2, 1]))
    test = FeatureMatrix(np.array([[1.0, 0.0]]), np.array([1]))
    assert knn_probe(train, test, k=1).predictions.tolist() == [2]
    assert knn_probe(train, test, k=2).predictions.tolist() == [1]


@settings(max_examples=25)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_knn_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    train, test = random_features(rng, 50, 5), random_features(rng, 20, 5)
    a = knn_probe(train, test, k=5).predictions
    b = knn_probe(FeatureMatrix(train.rows * scale, train.labels),
                  FeatureMatrix(test.rows * scale, test.labels), k=5).predictions
    np.testing.assert_array_equal(a, b)


def test_knn_examples():
    train = FeatureMatrix(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    query = FeatureMatrix(np.array([[0.1, 0.1]]), np.array([0]))
    assert knn_probe(train, query, k=1, metric="euclidean").predictions.tolist() == [0]
    rng = np.random.default_rng(0)
    feats = random_features(rng, 60, 8)
    assert knn_probe(feats, feats, k=1).accuracy == 1.0


def test_knn_random_features_near_chance():
    rng = np.random.default_rng(11)
    labels = np.repeat(np.arange(4), 250)
    train = FeatureMatrix(rng.standard_normal((1000, 16)), rng.permutation(labels))
    test = FeatureMatrix(rng.standard_normal((1000, 16)), rng.permutation(labels))
    assert 0.15 <= knn_probe(train, test).accuracy <= 0.35


def test_knn_errors():
    rng = np.random.default_rng(0)
    train = random_features(rng, 5, 3)
    with pytest.raises(ParameterError):
        knn_probe(train, train, k=6)
    with pytest.raises(ParameterError):
        knn_probe(train, train, k=0)
    with pytest.raises(DimensionError):
        knn_probe(train, random_features(rng, 5, 4), k=1)
    with pytest.raises(DimensionError):
        FeatureMatrix(np.zeros((3, 2)), np.zeros(2))


def test_solved_set_is_correct_ids():
    train = FeatureMatrix(np.eye(3), np.array([0, 1, 2]))
    test = FeatureMatrix(np.eye(3), np.array([0, 2, 2]), ids=np.array([10, 11, 12]))
    res = knn_probe(train, test, k=1)
    assert res.solved == frozenset({10, 12})
    assert res.solved <= frozenset(test.ids.tolist())


def blobs(rng, n, gap):
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 4)) * 0.3
    x[:, 0] += np.where(y == 1, gap, -gap)
    return FeatureMatrix(x, y)


def test_linear_probe_separable():
    rng = np.random.default_rng(0)
    assert linear_probe(blobs(rng, 300, 3.0), blobs(rng, 300, 3.0), epochs=30).accuracy >= 0.99


def test_linear_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    train, test = random_features(rng, 400, 8, classes=2), random_features(rng, 400, 8, classes=2)
    shuffled = FeatureMatrix(train.rows, rng.permutation(train.labels))
    assert abs(linear_probe(shuffled, test, epochs=30).accuracy - 0.5) <= 0.1


def test_linear_probe_zero_epochs_predicts_initial_class():
    rng = np.random.default_rng(2)
    test = blobs(rng, 100, 3.0)
    res = linear_probe(blobs(rng, 100, 3.0), test, epochs=0)
    assert np.all(res.predictions == 0)
    assert res.accuracy == pytest.approx(np.mean(test.labels == 0))


def test_linear_probe_deterministic_and_errors():
    rng = np.random.default_rng(3)
    train, test = random_features(rng, 100, 5), random_features(rng, 50, 5)
    a = linear_probe(train, test, epochs=5, seed=4).predictions
    np.testing.assert_array_equal(a, linear_probe(train, test, epochs=5, seed=4).predictions)
    with pytest.raises(ContractError):
        linear_probe(FeatureMatrix(train.rows, np.zeros(100)), test)


def test_blend_hand_example():
    f1 = FeatureMatrix(np.array([[2.0, 0.0]]), np.array([0]))
    f2 = FeatureMatrix(np.array([[0.0, 2.0]]), np.array([0]))
    np.testing.assert_allclose(blend_representations(f1, f2, 0.5, normalize=False).rows, [[1.0, 1.0]])


def test_blend_endpoints_reproduce_single_source_probe():
    rng = np.random.default_rng(4)
    tr1, te1 = random_features(rng, 80, 6), random_features(rng, 40, 6)
    tr2 = FeatureMatrix(rng.standard_normal((80, 6)), tr1.labels)
    te2 = FeatureMatrix(rng.standard_normal((40, 6)), te1.labels)
    for alpha, (tr, te) in ((1.0, (tr1, te1)), (0.0, (tr2, te2))):
        single = knn_probe(source_pipeline(tr), source_pipeline(te))
        blended = knn_probe(blend_representations(tr1, tr2, alpha), blend_representations(te1, te2, alpha))
        np.testing.assert_array_equal(blended.predictions, single.predictions)
        assert blended.accuracy == single.accuracy
    curve = alpha_sweep(tr1, te1, tr2, te2)
    assert [a for a, _ in curve] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_blend_projects_wider_source(rng):
    f1 = FeatureMatrix(rng.standard_normal((5, 8)), np.zeros(5))
    f2 = FeatureMatrix(rng.standard_normal((5, 4)), np.zeros(5))
    out = blend_representations(f1, f2, 0.3)
    assert out.rows.shape == (5, 4)
    np.testing.assert_allclose(out.rows.mean(axis=1), 0.0, atol=1e-12)


def test_blend_errors(rng):
    f = FeatureMatrix(rng.standard_normal((4, 3)), np.zeros(4))
    with pytest.raises(ParameterError):
        blend_representations(f, f, 1.5)
    with pytest.raises(DimensionError):
        blend_representations(f, FeatureMatrix(np.zeros((3, 3)), np.zeros(3)), 0.5)
