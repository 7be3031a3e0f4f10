import numpy as np
import pytest

from fedmeasure.data import EmbeddingSet
from fedmeasure.downstream import (
    LogisticConfig,
    accuracy,
    homogeneity,
    kmeans,
    kmeans_predict,
    logistic_fit,
    logistic_predict,
    pearson,
    run_correlation_experiment,
)
from fedmeasure.marketplace import DatasetTemplate, Scenario
from fedmeasure.measures import MeasureKind
from oracles import homogeneity_oracle, pearson_oracle


def blobs(n_per=50, gap=5.0, d=2, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_per, d))
    b = rng.standard_normal((n_per, d)) + gap
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(n_per, dtype=np.int64), np.ones(n_per, dtype=np.int64)])
    return EmbeddingSet(vectors=x, labels=y, name="blobs")


class TestLogistic:
    def test_separable_blobs(self):
        train = blobs(seed=1)
        test = blobs(seed=2)
        model = logistic_fit(train)
        assert accuracy(logistic_predict(model, test.vectors), test.labels) >= 0.99

    def test_memorizes_tiny_separable_problem(self):
        train = blobs(n_per=5, gap=6.0, seed=3)
        model = logistic_fit(train)
        assert accuracy(logistic_predict(model, train.vectors), train.labels) == 1.0

    def test_label_flip_symmetry(self):
        train = blobs(seed=4)
        flipped = EmbeddingSet(vectors=train.vectors, labels=1 - train.labels)
        test = blobs(seed=5)
        acc = accuracy(logistic_predict(logistic_fit(train), test.vectors), test.labels)
        acc_flipped = accuracy(
            logistic_predict(logistic_fit(flipped), test.vectors), 1 - test.labels
        )
        assert acc == pytest.approx(acc_flipped)

    def test_single_class_rejected(self):
        rng = np.random.default_rng(0)
        single = EmbeddingSet(
            vectors=rng.standard_normal((20, 3)), labels=np.zeros(20, dtype=np.int64)
        )
        with pytest.raises(ValueError, match="single class"):
            logistic_fit(single)

    def test_loss_nonincreasing(self):
        train = blobs(gap=2.0, seed=6)
        model = logistic_fit(train, LogisticConfig(epochs=200))
        losses = model.loss_history
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        train = blobs(seed=7)
        a = logistic_fit(train)
        b = logistic_fit(train)
        assert np.array_equal(a.weights, b.weights)


class TestKMeans:
    def test_two_blobs_recovered(self):
        data = blobs(gap=8.0, seed=8)
        result = kmeans(data.vectors, 2, seed=1)
        assert homogeneity(result.assignments, data.labels) == pytest.approx(1.0)

    def test_k_equals_n(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 3))
        result = kmeans(x, 6, seed=2)
        assert result.inertia == pytest.approx(0.0, abs=1e-18)
        assert len(set(result.assignments.tolist())) == 6

    def test_duplicate_rows_share_assignments(self):
        rng = np.random.default_rng(10)
        base = rng.standard_normal((20, 3))
        x = np.concatenate([base, base])
        result = kmeans(x, 4, seed=3)
        assert np.array_equal(result.assignments[:20], result.assignments[20:])

    def test_inertia_nonincreasing(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((300, 5))
        result = kmeans(x, 6, seed=4)
        hist = result.inertia_history
        assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2)), 3, seed=0)

    def test_predict_matches_training_assignments(self):
        data = blobs(gap=6.0, seed=12)
        result = kmeans(data.vectors, 2, seed=5)
        assert np.array_equal(kmeans_predict(result, data.vectors), result.assignments)


class TestHomogeneity:
    def test_perfect_match(self):
        assert homogeneity([0, 1, 2, 0], [5, 7, 9, 5]) == pytest.approx(1.0)

    def test_single_cluster_balanced_classes(self):
        assert homogeneity([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(0.0)

    def test_refinement_keeps_purity(self):
        labels = [0, 0, 1, 1, 2, 2]
        clusters = [0, 1, 2, 3, 4, 5]
        assert homogeneity(clusters, labels) == pytest.approx(1.0)

    def test_degenerate_single_class(self):
        assert homogeneity([0, 1, 0], [3, 3, 3]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            homogeneity([0, 1], [0])

    def test_cluster_label_permutation_invariance(self):
        rng = np.random.default_rng(13)
        labels = rng.integers(0, 4, size=60)
        clusters = rng.integers(0, 5, size=60)
        remap = rng.permutation(5)
        assert homogeneity(clusters, labels) == pytest.approx(
            homogeneity(remap[clusters], labels)
        )

    def test_matches_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 4, size=n).tolist()
            clusters = rng.integers(0, 3, size=n).tolist()
            assert homogeneity(clusters, labels) == pytest.approx(
                homogeneity_oracle(clusters, labels), abs=1e-12
            )


class TestPearson:
    def test_identity_and_negation(self):
        x = [1.0, 2.0, 4.0, 8.0]
        assert pearson(x, x) == pytest.approx(1.0)
        assert pearson(x, [-v for v in x]) == pytest.approx(-1.0)

    def test_linearity(self):
        assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0)

    def test_constant_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_affine_invariance(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(30)
        y = rng.standard_normal(30)
        base = pearson(x, y)
        assert pearson(3.0 * x + 7.0, y) == pytest.approx(base, abs=1e-12)
        assert pearson(x, 0.5 * y - 2.0) == pytest.approx(base, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal(25)
        y = x * 0.3 + rng.standard_normal(25)
        assert pearson(x, y) == pytest.approx(pearson_oracle(list(x), list(y)), abs=1e-12)


def correlation_scenario(**kw):
    base = dict(
        name="corr-test",
        seed=31,
        trials=2,
        k=4,
        buyer_points=60,
        test_points=120,
        template=DatasetTemplate(
            dim=16, classes=4, mean_scale=1.5, class_scale=1.0, within_scale=0.08,
            shared_axes=0, shared_scale=0.0,
        ),
        dirichlet_sellers=12,
        dirichlet_points=400,
        dirichlet_alpha=0.5,
    )
    base.update(kw)
    return Scenario(**base)


class TestCorrelationExperiment:
    def test_clustering_volume_correlation_positive(self):
        result = run_correlation_experiment(correlation_scenario(), task="clustering")
        assert result.mean_correlation(MeasureKind.VOLUME) > 0

    def test_binary_task_runs(self):
        result = run_correlation_experiment(correlation_scenario(trials=1), task="binary")
        scored = [o for o in result.outcomes if o.test_metric is not None]
        assert len(scored) >= 10
        for outcome in scored:
            assert 0.0 <= outcome.test_metric <= 1.0

    def test_rows_shape(self):
        result = run_correlation_experiment(correlation_scenario(trials=1), task="clustering")
        rows = result.to_rows()
        seller_rows = [r for r in rows if r["record"] == "seller"]
        assert len(seller_rows) == 12
        assert any(r["record"] == "pearson" for r in rows)

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError, match="unknown task"):
            run_correlation_experiment(correlation_scenario(), task="regression")

    def test_needs_multiple_sellers(self):
        with pytest.raises(ValueError, match="at least two"):
            run_correlation_experiment(correlation_scenario(dirichlet_sellers=0))

    def test_deterministic(self):
        a = run_correlation_experiment(correlation_scenario(trials=1), task="clustering")
        b = run_correlation_experiment(correlation_scenario(trials=1), task="clustering")
        assert a.per_buyer == b.per_buyer
