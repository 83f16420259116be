"""CART decision trees and random forests for binary (one-vs-all) stay-type tasks.

Trees split on the maximum Gini impurity decrease over a random subset of features, using
midpoints between consecutive distinct sorted values as thresholds. Rows with
`x <= threshold` go left. Leaves hold the fraction of positive training rows; a tree votes
positive when that fraction exceeds one half, and a forest scores a row by the fraction of
trees voting positive.

Feature subsets are drawn like a shuffled deck: features are visited in a random
permutation, constant features (in the node) are skipped without counting, and the search
stops once `features_per_split` non-constant features have been evaluated.

Randomness: the forest seed feeds a numpy SeedSequence that spawns one child stream per
tree, in tree order. Each tree's stream is consumed by its bootstrap draw first, then by
the split-feature permutations in pre-order (node, left subtree, right subtree). Trees are
therefore independent of one another and of how many workers train them.

Model JSON nests nodes as `{"feat", "thresh", "left", "right"}` and leaves as
`{"leaf_prob"}`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from .models import BustopError

LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 8
    features_per_split: int = 3
    min_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        assert self.n_trees >= 1, "need at least one tree"
        assert self.max_depth >= 1, "max_depth must be positive"
        assert self.features_per_split >= 1 and self.min_leaf >= 1

    def to_json(self) -> dict:
        return asdict(self)


class EmptyDataset(BustopError):
    def __init__(self) -> None:
        super().__init__("cannot train a tree on zero rows")


class SingleClassDataset(BustopError):
    def __init__(self, n_rows: int, label: int | None = None) -> None:
        detail = f"all labels are {label}" if label is not None else "fewer than two rows"
        super().__init__(f"forest needs both classes; {n_rows} rows, {detail}")


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat node arrays indexed by node id; node 0 is the root."""

    feature: np.ndarray  # LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_prob: np.ndarray
    importance: np.ndarray  # unnormalized impurity decrease per feature

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        """Depth of the deepest leaf (a single-leaf tree has depth 0)."""
        deepest, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] == LEAF:
                deepest = max(deepest, d)
            else:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return deepest

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by each row."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            internal = self.feature[node] != LEAF
            if not internal.any():
                return node
            r, n = rows[internal], node[internal]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_prob[self.apply(X)]

    def vote(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X) > 0.5

    def to_json(self, node: int = 0) -> dict:
        if self.feature[node] == LEAF:
            return {"leaf_prob": float(self.leaf_prob[node])}
        return {
            "feat": int(self.feature[node]),
            "thresh": float(self.threshold[node]),
            "left": self.to_json(int(self.left[node])),
            "right": self.to_json(int(self.right[node])),
        }

    @classmethod
    def from_json(cls, record: dict, n_features: int) -> DecisionTree:
        builder = _TreeBuilder(n_features)

        def visit(r: dict) -> int:
            if "leaf_prob" in r:
                return builder.leaf(float(r["leaf_prob"]))
            node = builder.split_node(int(r["feat"]), float(r["thresh"]))
            builder.left[node] = visit(r["left"])
            builder.right[node] = visit(r["right"])
            return node

        visit(record)
        return builder.finish()


class _TreeBuilder:
    def __init__(self, n_features: int):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_prob: list[float] = []
        self.importance = np.zeros(n_features)

    def _add(self, feature: int, threshold: float, prob: float) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.leaf_prob.append(prob)
        return len(self.feature) - 1

    def leaf(self, prob: float) -> int:
        return self._add(LEAF, 0.0, prob)

    def split_node(self, feature: int, threshold: float) -> int:
        return self._add(feature, threshold, float("nan"))

    def finish(self) -> DecisionTree:
        arrays = [
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=np.float64),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.leaf_prob, dtype=np.float64),
            self.importance,
        ]
        for a in arrays:
            a.setflags(write=False)
        return DecisionTree(*arrays)


def best_split_on_feature(x: np.ndarray, y: np.ndarray, min_leaf: int = 1) -> tuple[float, float] | None:
    """(impurity decrease, threshold) of the best Gini split of `y` on values `x`, or None.

    The decrease is weighted by row counts: n·G(parent) − n_l·G(left) − n_r·G(right).
    Among equal decreases the lowest threshold wins.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order].astype(np.float64)
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    pos_left = np.cumsum(ys)[:-1]
    pos_right = ys.sum() - pos_left
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    # n·G = n − (p² + q²)/n for a node with p positives and q negatives
    weighted_left = n_left - (pos_left**2 + (n_left - pos_left) ** 2) / n_left
    weighted_right = n_right - (pos_right**2 + (n_right - pos_right) ** 2) / n_right
    total_pos = ys.sum()
    parent = n - (total_pos**2 + (n - total_pos) ** 2) / n
    decrease = np.where(valid, parent - weighted_left - weighted_right, -np.inf)
    i = int(np.argmax(decrease))
    lo, hi = xs[i], xs[i + 1]
    threshold = lo + (hi - lo) / 2
    if threshold >= hi:
        threshold = lo
    return float(decrease[i]), float(threshold)


def train_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator) -> DecisionTree:
    """Grow one CART tree on all rows of X (no resampling here)."""
    if len(X) == 0:
        raise EmptyDataset()
    n_features = X.shape[1]
    builder = _TreeBuilder(n_features)
    y = np.asarray(y, dtype=np.int64)

    def grow(rows: np.ndarray, depth: int) -> int:
        labels = y[rows]
        prob = float(labels.mean())
        if depth >= params.max_depth or prob in (0.0, 1.0) or len(rows) < 2 * params.min_leaf:
            return builder.leaf(prob)
        best: tuple[float, int, float] | None = None
        evaluated = 0
        for f in rng.permutation(n_features):
            x = X[rows, f]
            if x.min() == x.max():
                continue
            found = best_split_on_feature(x, labels, params.min_leaf)
            evaluated += 1
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], int(f), found[1])
            if evaluated == params.features_per_split:
                break
        if best is None:
            return builder.leaf(prob)
        decrease, feature, threshold = best
        builder.importance[feature] += decrease
        node = builder.split_node(feature, threshold)
        go_left = X[rows, feature] <= threshold
        builder.left[node] = grow(rows[go_left], depth + 1)
        builder.right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(len(X)), 0)
    return builder.finish()


def _train_member(
    X: np.ndarray, y: np.ndarray, params: ForestParams, seed: np.random.SeedSequence
) -> tuple[DecisionTree, np.ndarray]:
    rng = np.random.default_rng(seed)
    n = len(X)
    rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
    in_bag = np.zeros(n, dtype=bool)
    in_bag[rows] = True
    return train_tree(X[rows], y[rows], params, rng), in_bag


@dataclass(frozen=True, eq=False)
class Forest:
    params: ForestParams
    n_features: int
    trees: tuple[DecisionTree, ...]
    in_bag: tuple[np.ndarray, ...] = ()  # training-time only; not serialized

    def votes(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting positive, per row."""
        X = np.asarray(X, dtype=np.float64)
        return np.mean([tree.vote(X) for tree in self.trees], axis=0)

    def predict(self, X: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return self.votes(X) >= threshold

    def oob_votes(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(vote fraction over trees that never saw the row, mask of rows with any such tree)."""
        assert self.in_bag, "out-of-bag votes need the training-time bootstrap record"
        total = np.zeros(len(X))
        count = np.zeros(len(X))
        for tree, in_bag in zip(self.trees, self.in_bag):
            out = ~in_bag
            total[out] += tree.vote(X[out])
            count[out] += 1
        scored = count > 0
        return np.divide(total, count, out=np.zeros(len(X)), where=scored), scored

    def feature_importances(self) -> np.ndarray:
        """Mean raw impurity decrease per feature across trees, normalized once to sum 1."""
        mean = np.mean([tree.importance for tree in self.trees], axis=0)
        total = mean.sum()
        return mean / total if total > 0 else np.full(self.n_features, 1 / self.n_features)

    def max_depth(self) -> int:
        return max(tree.depth() for tree in self.trees)

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "n_features": self.n_features,
            "trees": [tree.to_json() for tree in self.trees],
        }

    @classmethod
    def from_json(cls, record: dict) -> Forest:
        n_features = int(record["n_features"])
        return cls(
            params=ForestParams(**record["params"]),
            n_features=n_features,
            trees=tuple(DecisionTree.from_json(t, n_features) for t in record["trees"]),
        )


def train_forest(X: np.ndarray, y: np.ndarray, params: ForestParams, n_jobs: int = 1) -> Forest:
    """Bagged forest of `params.n_trees` trees; identical for any `n_jobs`."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) < 2:
        raise SingleClassDataset(len(X))
    if y.min() == y.max():
        raise SingleClassDataset(len(X), int(y[0]))
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    members = Parallel(n_jobs=n_jobs)(delayed(_train_member)(X, y, params, s) for s in seeds)
    trees, in_bag = zip(*members)
    logger.debug(f"Trained {params.n_trees} trees on {len(X)} rows × {X.shape[1]} features")
    return Forest(params, X.shape[1], tuple(trees), tuple(in_bag))
