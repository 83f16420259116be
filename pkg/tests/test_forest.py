import json

import numpy as np
import pytest

from bustop.forest import (
    LEAF,
    DecisionTree,
    EmptyDataset,
    Forest,
    ForestParams,
    SingleClassDataset,
    best_split_on_feature,
    train_forest,
    train_tree,
)
from bustop.learner import weighted_f1


def gini_weighted(y: np.ndarray) -> float:
    """n·Gini for a node, written out the long way."""
    n = len(y)
    if n == 0:
        return 0.0
    p = y.sum() / n
    return n * (1 - p * p - (1 - p) * (1 - p))


def exhaustive_best(X: np.ndarray, y: np.ndarray) -> float:
    best = -np.inf
    parent = gini_weighted(y)
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            t = (a + b) / 2
            left = X[:, f] <= t
            best = max(best, parent - gini_weighted(y[left]) - gini_weighted(y[~left]))
    return best


def separable(n: int = 50, n_features: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int64)
    X = rng.normal(0, 1, (n, n_features))
    X[:, 0] = y * 10 + rng.uniform(0, 1, n)
    return X, y


class TestBestSplit:
    def test_perfect_split_threshold_is_midpoint(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([0, 0, 1, 1])
        decrease, threshold = best_split_on_feature(x, y)
        assert threshold == 2.5
        assert decrease == pytest.approx(gini_weighted(y))

    def test_constant_feature_has_no_split(self):
        assert best_split_on_feature(np.ones(5), np.array([0, 1, 0, 1, 1])) is None

    def test_min_leaf_excludes_small_children(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([1, 0, 0, 0])
        _, threshold = best_split_on_feature(x, y, min_leaf=2)
        assert threshold == 2.5

    def test_adjacent_floats_threshold_stays_left(self):
        lo = 1.0
        hi = np.nextafter(lo, 2.0)
        _, threshold = best_split_on_feature(np.array([lo, hi]), np.array([0, 1]))
        assert lo <= threshold < hi


class TestTrainTree:
    def test_root_split_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            X = rng.integers(0, 6, (20, 4)).astype(np.float64)
            y = rng.integers(0, 2, 20)
            if y.min() == y.max():
                continue
            params = ForestParams(max_depth=1, features_per_split=4)
            tree = train_tree(X, y, params, np.random.default_rng(0))
            expected = exhaustive_best(X, y)
            if tree.feature[0] == LEAF:
                assert expected == -np.inf
            else:
                assert tree.importance.sum() == pytest.approx(expected, abs=1e-9)

    def test_depth_limit(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(300, 5))
        y = rng.integers(0, 2, 300)
        tree = train_tree(X, y, ForestParams(max_depth=3), rng)
        assert tree.depth() <= 3

    def test_pure_node_is_leaf(self):
        tree = train_tree(np.arange(4.0)[:, None], np.ones(4), ForestParams(), np.random.default_rng(0))
        assert tree.n_nodes == 1
        assert tree.leaf_prob[0] == 1.0

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            train_tree(np.zeros((0, 3)), np.zeros(0), ForestParams(), np.random.default_rng(0))

    def test_vote_threshold_is_strict(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        tree = train_tree(X, np.array([0, 1, 1, 1]), ForestParams(), np.random.default_rng(0))
        assert tree.predict_proba(np.array([[0.0]]))[0] == 0.5
        assert not tree.vote(np.array([[0.0]]))[0]
        assert tree.vote(np.array([[1.0]]))[0]

    def test_json_round_trip_predicts_identically(self):
        X, y = separable()
        tree = train_tree(X, y, ForestParams(), np.random.default_rng(1))
        again = DecisionTree.from_json(json.loads(json.dumps(tree.to_json())), X.shape[1])
        assert np.array_equal(again.predict_proba(X), tree.predict_proba(X))
        assert again.to_json() == tree.to_json()


class TestForest:
    def test_depth_at_most_eight(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(200, 13))
        y = rng.integers(0, 2, 200)
        forest = train_forest(X, y, ForestParams(n_trees=20))
        assert forest.max_depth() <= 8

    def test_separable_set_trains_to_perfect_f1(self):
        X, y = separable()
        forest = train_forest(X, y, ForestParams(n_trees=25))
        assert weighted_f1(forest.predict(X), y.astype(bool)) == 1.0

    def test_same_seed_same_json(self):
        X, y = separable(seed=3)
        params = ForestParams(n_trees=15, seed=42)
        first = json.dumps(train_forest(X, y, params).to_json())
        second = json.dumps(train_forest(X, y, params).to_json())
        assert first == second

    def test_threads_do_not_change_the_model(self):
        X, y = separable(seed=4)
        params = ForestParams(n_trees=12, seed=5)
        one = json.dumps(train_forest(X, y, params, n_jobs=1).to_json())
        many = json.dumps(train_forest(X, y, params, n_jobs=3).to_json())
        assert one == many

    def test_different_seeds_differ(self):
        X, y = separable(seed=5)
        a = train_forest(X, y, ForestParams(n_trees=10, seed=1)).to_json()
        b = train_forest(X, y, ForestParams(n_trees=10, seed=2)).to_json()
        assert a != b

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassDataset):
            train_forest(np.zeros((5, 2)), np.ones(5), ForestParams())
        with pytest.raises(SingleClassDataset):
            train_forest(np.zeros((1, 2)), np.ones(1), ForestParams())

    def test_importances_sum_to_one_and_find_the_signal(self):
        X, y = separable(n=80, n_features=6, seed=6)
        importances = train_forest(X, y, ForestParams(n_trees=30)).feature_importances()
        assert importances.sum() == pytest.approx(1.0)
        assert int(np.argmax(importances)) == 0

    def test_importances_average_raw_decreases_before_normalizing(self):
        def stump(importance):
            one = np.array([0])
            return DecisionTree(
                np.array([LEAF]), np.zeros(1), one, one, np.array([0.5]), np.asarray(importance, dtype=float)
            )

        forest = Forest(ForestParams(n_trees=2), 2, (stump([10.0, 0.0]), stump([0.0, 1.0])))
        assert forest.feature_importances() == pytest.approx([10 / 11, 1 / 11])

    @pytest.mark.parametrize("seed", range(10))
    def test_noise_features_share_importance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(150, 13))
        y = rng.integers(0, 2, 150)
        importances = train_forest(X, y, ForestParams(n_trees=60, seed=seed)).feature_importances()
        assert importances.max() <= 0.25

    def test_oob_votes_cover_rows(self):
        X, y = separable(seed=7)
        forest = train_forest(X, y, ForestParams(n_trees=40))
        votes, scored = forest.oob_votes(X)
        assert scored.all()
        assert ((votes >= 0) & (votes <= 1)).all()
        assert weighted_f1(votes[scored] >= 0.5, y[scored].astype(bool)) >= 0.9

    def test_json_round_trip(self):
        X, y = separable(seed=8)
        forest = train_forest(X, y, ForestParams(n_trees=5))
        again = Forest.from_json(json.loads(json.dumps(forest.to_json())))
        assert np.array_equal(again.votes(X), forest.votes(X))
        assert again.params == forest.params


def test_no_bootstrap_uses_all_rows():
    X, y = separable()
    forest = train_forest(X, y, ForestParams(n_trees=3, bootstrap=False))
    assert all(in_bag.all() for in_bag in forest.in_bag)
