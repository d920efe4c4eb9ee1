import numpy as np
import pytest

from regimenlab.metric_matching import (
    BoostedTrees,
    DistanceMetric,
    InsufficientGoodNeighborsError,
    distance,
    export_groups,
    export_metric,
    honest_folds,
    learn_metric,
    match,
)
from regimenlab.rng import substream


class TestBoostedTrees:
    def test_training_mse_non_increasing(self):
        rng = substream(1, "boost")
        X = rng.normal(0, 1, (200, 6))
        y = X[:, 0] * 2.0 + np.sin(X[:, 1]) + rng.normal(0, 0.1, 200)
        booster = BoostedTrees(rounds=60).fit(X, y)
        path = booster.train_mse_path
        assert len(path) > 10
        assert all(a >= b - 1e-12 for a, b in zip(path, path[1:]))

    def test_fits_a_step_function_exactly(self):
        X = np.linspace(0, 1, 64)[:, None]
        y = (X[:, 0] > 0.5).astype(float)
        booster = BoostedTrees(rounds=200).fit(X, y)
        assert np.max(np.abs(booster.predict(X) - y)) < 1e-4

    def test_constant_target_trains_nothing(self):
        X = np.arange(40, dtype=float)[:, None]
        booster = BoostedTrees().fit(X, np.full(40, 3.0))
        assert len(booster.trees) == 0
        assert np.allclose(booster.predict(X), 3.0)


class TestLearnMetric:
    def test_single_relevant_feature_dominates(self):
        rng = substream(2, "metric")
        V = rng.normal(0, 1, (400, 8))
        metric = learn_metric(V, V[:, 0].copy())
        assert metric.weights[0] > 0.9
        assert abs(np.sum(metric.weights) - 1.0) < 1e-12

    def test_constant_outcome_uniform_fallback(self):
        rng = substream(3, "metric")
        V = rng.normal(0, 1, (50, 5))
        metric = learn_metric(V, np.zeros(50))
        assert metric.uniform_fallback
        np.testing.assert_allclose(metric.weights, 0.2)

    def test_requires_minimum_rows(self):
        with pytest.raises(ValueError):
            learn_metric(np.zeros((10, 3)), np.zeros(10))

    def test_rejects_nonfinite_features(self):
        V = np.zeros((30, 3))
        V[0, 0] = np.inf
        with pytest.raises(ValueError):
            learn_metric(V, np.arange(30, dtype=float))

    def test_honesty_estimation_outcomes_never_matter(self):
        rng = substream(4, "metric")
        V = rng.normal(0, 1, (120, 6))
        y = (V[:, 1] > 0).astype(float)
        folds = honest_folds(120, 5, substream(5, "folds"))
        train = folds == 0
        metric_clean = learn_metric(V[train], y[train])
        y_tainted = y.copy()
        y_tainted[~train] = rng.integers(0, 2, np.sum(~train))  # poison held-out outcomes
        metric_tainted = learn_metric(V[train], y_tainted[train])
        np.testing.assert_array_equal(metric_clean.weights, metric_tainted.weights)


class TestDistance:
    def test_identity_point(self):
        metric = DistanceMetric(weights=np.ones(3))
        v = np.array([1.0, 2.0, 3.0])
        assert distance(metric, v, v) == 0.0

    def test_euclidean_squared_under_unit_weights(self):
        metric = DistanceMetric(weights=np.ones(2))
        assert distance(metric, np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 25.0

    def test_zero_weight_coordinate_is_ignored(self):
        metric = DistanceMetric(weights=np.array([1.0, 0.0]))
        a, b = np.array([1.0, 5.0]), np.array([1.0, -100.0])
        assert distance(metric, a, b) == 0.0

    def test_symmetry_and_nonnegativity(self):
        rng = substream(6, "dist")
        metric = DistanceMetric(weights=rng.uniform(0, 1, 5) + 0.01)
        for _ in range(100):
            a, b = rng.normal(0, 3, 5), rng.normal(0, 3, 5)
            assert distance(metric, a, b) == distance(metric, b, a)
            assert distance(metric, a, b) >= 0.0

    def test_sqrt_triangle_inequality_positive_weights(self):
        rng = substream(7, "dist")
        metric = DistanceMetric(weights=rng.uniform(0.1, 2, 4))
        for _ in range(200):
            a, b, c = (rng.normal(0, 2, 4) for _ in range(3))
            dab = np.sqrt(distance(metric, a, b))
            dbc = np.sqrt(distance(metric, b, c))
            dac = np.sqrt(distance(metric, a, c))
            assert dac <= dab + dbc + 1e-12

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            DistanceMetric(weights=np.zeros(3))


class TestHonestFolds:
    def test_balanced_partition(self):
        folds = honest_folds(103, 5, substream(8, "folds"))
        sizes = np.bincount(folds, minlength=5)
        assert sizes.sum() == 103
        assert sizes.max() - sizes.min() <= 1

    def test_deterministic_under_seed(self):
        a = honest_folds(50, 5, substream(9, "folds"))
        b = honest_folds(50, 5, substream(9, "folds"))
        np.testing.assert_array_equal(a, b)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            honest_folds(3, 5, substream(10, "folds"))


def simple_pool(n, rng):
    ids = np.arange(n)
    V = rng.normal(0, 1, (n, 4))
    y = rng.integers(0, 2, n)
    return ids, V, y


class TestMatch:
    METRIC = DistanceMetric(weights=np.full(4, 0.25))

    def test_exact_duplicate_found_first(self):
        rng = substream(11, "match")
        ids, V, y = simple_pool(30, rng)
        y[:] = 0
        V[17] = V[3]
        group = match(3, V[3], ids, V, y, self.METRIC, k=1, filter_good=True)
        assert list(group.neighbor_ids) == [17]
        assert group.distances[0] == 0.0

    def test_zero_caliper_on_distinct_points(self):
        rng = substream(12, "match")
        ids, V, y = simple_pool(30, rng)
        group = match(0, V[0], ids, V, y, self.METRIC, caliper=0.0)
        assert len(group) == 0

    def test_knn_order_statistic(self):
        ids = np.arange(7)
        V = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0], [6.0]])
        y = np.zeros(7, dtype=int)
        metric = DistanceMetric(weights=np.ones(1))
        group = match(0, V[0], ids, V, y, metric, k=5, filter_good=True)
        assert list(group.neighbor_ids) == [1, 2, 3, 4, 5]
        np.testing.assert_allclose(group.distances, [1.0, 4.0, 9.0, 16.0, 25.0])

    def test_good_outcome_filter(self):
        ids = np.arange(5)
        V = np.zeros((5, 1))
        y = np.array([0, 1, 0, 1, 0])
        metric = DistanceMetric(weights=np.ones(1))
        group = match(0, V[0], ids, V, y, metric, k=2, filter_good=True)
        assert set(group.neighbor_ids) <= {2, 4}

    def test_insufficient_good_neighbors_reports_shortfall(self):
        ids = np.arange(4)
        V = np.zeros((4, 1))
        y = np.array([0, 1, 1, 0])
        metric = DistanceMetric(weights=np.ones(1))
        with pytest.raises(InsufficientGoodNeighborsError) as err:
            match(0, V[0], ids, V, y, metric, k=3, filter_good=True)
        assert err.value.shortfall == 2

    def test_ties_break_toward_lower_id(self):
        ids = np.array([9, 4, 7])
        V = np.array([[1.0], [1.0], [1.0]])
        y = np.zeros(3, dtype=int)
        metric = DistanceMetric(weights=np.ones(1))
        group = match(99, np.array([0.0]), ids, V, y, metric, k=3)
        assert list(group.neighbor_ids) == [4, 7, 9]

    def test_membership_invariant_to_weight_rescaling(self):
        rng = substream(13, "match")
        ids, V, y = simple_pool(60, rng)
        w = rng.uniform(0.1, 1, 4)
        m1 = DistanceMetric(weights=w)
        m9 = DistanceMetric(weights=9.0 * w)
        for center in range(10):
            g1 = match(center, V[center], ids, V, y, m1, k=8)
            g9 = match(center, V[center], ids, V, y, m9, k=8)
            np.testing.assert_array_equal(g1.neighbor_ids, g9.neighbor_ids)
            # radius strictly between the 7th and 8th distances so the
            # threshold set is robust to rescaling roundoff
            r = float(np.mean(g1.distances[-2:]))
            c1 = match(center, V[center], ids, V, y, m1, caliper=r)
            c9 = match(center, V[center], ids, V, y, m9, caliper=9.0 * r)
            np.testing.assert_array_equal(c1.neighbor_ids, c9.neighbor_ids)
            assert len(c1) == 7

    def test_exactly_one_mode_required(self):
        ids, V, y = simple_pool(10, substream(14, "match"))
        with pytest.raises(ValueError):
            match(0, V[0], ids, V, y, self.METRIC)
        with pytest.raises(ValueError):
            match(0, V[0], ids, V, y, self.METRIC, k=3, caliper=1.0)


class TestExports:
    def test_metric_csv(self, tmp_path):
        metric = DistanceMetric(weights=np.array([0.75, 0.25]))
        export_metric(metric, ["age", "ed50"], tmp_path / "metric.csv")
        lines = (tmp_path / "metric.csv").read_text().splitlines()
        assert lines[0] == "feature,weight"
        assert lines[1].startswith("age,0.75")

    def test_groups_csv(self, tmp_path):
        rng = substream(15, "match")
        ids, V, y = simple_pool(20, rng)
        metric = DistanceMetric(weights=np.ones(4))
        groups = [match(i, V[i], ids, V, y, metric, k=3) for i in range(2)]
        export_groups(groups, tmp_path / "groups.csv")
        lines = (tmp_path / "groups.csv").read_text().splitlines()
        assert lines[0] == "center,neighbor,distance"
        assert len(lines) == 1 + 6
