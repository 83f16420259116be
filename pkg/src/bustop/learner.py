"""Stay-type characterization: one-vs-all forests with SMOTE balancing and per-model feature selection.

For each of the five stay types the pipeline is:

    binarize (positive iff the type is in the row's label set)
    → SMOTE-balance the minority class
    → rank features by a 250-tree forest's impurity importances
    → keep the top-k features, k ≤ 8 chosen by the out-of-bag weighted F1 of a forest
      (final-forest size) trained on them, smaller k on ties
    → train the 100-tree, depth-8 forest on the kept features

Prediction polls all five forests. Regular types (BusStop, Signal, Congestion, Turn) may
co-occur; AdHoc is returned only when no regular type is predicted, and also when every
forest is negative.

Seeds: the learner seed feeds a SeedSequence whose children, one per stay type in
declaration order, each spawn (SMOTE stream, selector forest seed, final forest seed).
Cross-validation spawns one child per repeat, then one per type, then one per fold.
"""

from __future__ import annotations

import json
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from .features import FEATURE_NAMES, FeatureRecord, FeatureVector
from .forest import Forest, ForestParams, train_forest
from .models import BustopError, StayType, is_exclusive

BINARY_FEATURES = (FEATURE_NAMES.index("f13"),)
FEATURE_GROUPS: dict[str, tuple[int, ...]] = {
    "spatial": tuple(range(8, 13)),  # f9-f13: RSI and map encoding
    "temporal": tuple(range(0, 8)),  # f1-f8: duration, noise, WiFi
    "full": tuple(range(13)),
}


class InsufficientClassSupport(BustopError):
    def __init__(self, stay_type: StayType, count: int, needed: int, label: str = "positive") -> None:
        self.stay_type = stay_type
        super().__init__(f"{stay_type}: {count} {label} rows, need at least {needed}")


class TooFewMinoritySamples(BustopError):
    def __init__(self, count: int) -> None:
        super().__init__(f"SMOTE needs at least 2 minority rows, got {count}")


class LengthMismatch(BustopError):
    def __init__(self, a: int, b: int) -> None:
        super().__init__(f"predictions ({a}) and truth ({b}) differ in length")


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Dataset:
    records: tuple[FeatureRecord, ...]

    def __post_init__(self):
        for r in self.records:
            if not is_exclusive(r.labels):
                raise BustopError(f"{r.stay_id}: AdHoc combined with other types {StayType.format_set(r.labels)}")
        if self.records and not np.isfinite(self.X).all():
            raise BustopError("dataset has non-finite feature values")

    @classmethod
    def from_records(cls, records: Iterable[FeatureRecord]) -> Dataset:
        """Labeled records only; unlabeled stays carry no training signal and are dropped."""
        records = list(records)
        labeled = tuple(r for r in records if r.labels)
        if dropped := len(records) - len(labeled):
            logger.warning(f"Dropping {dropped} unlabeled stays from the dataset")
        return cls(labeled)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def X(self) -> np.ndarray:
        return np.array([r.vector for r in self.records], dtype=np.float64).reshape(-1, len(FEATURE_NAMES))

    @property
    def stay_ids(self) -> list[str]:
        return [r.stay_id for r in self.records]

    def binarize(self, stay_type: StayType) -> np.ndarray:
        return np.array([stay_type in r.labels for r in self.records], dtype=np.int64)

    def subset(self, rows: Iterable[int]) -> Dataset:
        return Dataset(tuple(self.records[i] for i in rows))


@dataclass(frozen=True)
class LearnerParams:
    forest: ForestParams = ForestParams()
    selector_trees: int = 250
    k_max: int = 8
    smote_k: int = 5
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        assert 1 <= self.k_max <= len(FEATURE_NAMES), "k_max must be in 1..13"
        assert 0 < self.threshold <= 1


class Synthesis(NamedTuple):
    rows: np.ndarray  # (n_synthetic, n_features)
    base: np.ndarray  # index of the sampled minority row
    neighbor: np.ndarray  # index of the neighbor interpolated towards


def min_max_scale(X: np.ndarray) -> np.ndarray:
    """Scale each column to [0, 1] over the rows of X; constant columns become 0."""
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (X - lo) / span, 0.0)


def smote(
    minority: np.ndarray,
    n_synthetic: int,
    rng: np.random.Generator,
    k_neighbors: int = 5,
    binary_columns: Sequence[int] = BINARY_FEATURES,
) -> Synthesis:
    """Synthetic minority rows x + u·(x_nn − x), x_nn among the k nearest minority rows of x.

    Neighbors are found by Euclidean distance over min-max scaled features. Interpolation is
    done in the original units, which is the same segment since scaling is affine per column.
    Binary columns are rounded back to {0, 1}.
    """
    minority = np.asarray(minority, dtype=np.float64)
    n_features = minority.shape[1] if minority.ndim == 2 else len(FEATURE_NAMES)
    if n_synthetic == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Synthesis(np.zeros((0, n_features)), empty, empty)
    if len(minority) < 2:
        raise TooFewMinoritySamples(len(minority))
    k = min(k_neighbors, len(minority) - 1)
    scaled = min_max_scale(minority)
    distances = np.linalg.norm(scaled[:, None, :] - scaled[None, :, :], axis=2)
    np.fill_diagonal(distances, np.inf)
    neighbors = np.argsort(distances, axis=1, kind="stable")[:, :k]
    base = rng.integers(0, len(minority), size=n_synthetic)
    neighbor = neighbors[base, rng.integers(0, k, size=n_synthetic)]
    u = rng.random(n_synthetic)[:, None]
    rows = minority[base] + u * (minority[neighbor] - minority[base])
    for c in binary_columns:
        if c < n_features:
            rows[:, c] = np.round(rows[:, c])
    return Synthesis(rows, base, neighbor)


def balance(
    X: np.ndarray, y: np.ndarray, rng: np.random.Generator, k_neighbors: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class with SMOTE until both classes have equal counts."""
    positives = int(y.sum())
    negatives = len(y) - positives
    minority_label = int(positives < negatives)
    deficit = abs(positives - negatives)
    synthetic = smote(X[y == minority_label], deficit, rng, k_neighbors).rows
    X_out = np.vstack([X, synthetic])
    y_out = np.concatenate([y, np.full(len(synthetic), minority_label, dtype=np.int64)])
    return X_out, y_out


def weighted_f1(predictions: Sequence[bool] | np.ndarray, truth: Sequence[bool] | np.ndarray) -> float:
    """Support-weighted mean of the positive-class and negative-class F1 scores.

    A class whose F1 is undefined (no predictions and no support) scores 0; a class
    without support carries no weight anyway.
    """
    pred = np.asarray(predictions, dtype=bool)
    true = np.asarray(truth, dtype=bool)
    if len(pred) != len(true):
        raise LengthMismatch(len(pred), len(true))
    if len(true) == 0:
        return 0.0
    score = 0.0
    for cls in (True, False):
        tp = int(np.sum((pred == cls) & (true == cls)))
        denominator = int(np.sum(pred == cls)) + int(np.sum(true == cls))
        f1 = 2 * tp / denominator if denominator else 0.0
        score += f1 * np.sum(true == cls) / len(true)
    return float(score)


class Confusion(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def of(cls, predictions: np.ndarray, truth: np.ndarray) -> Confusion:
        p, t = np.asarray(predictions, dtype=bool), np.asarray(truth, dtype=bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))

    def __add__(self, other: Confusion) -> Confusion:  # type: ignore[override]
        return Confusion(*(a + b for a, b in zip(self, other)))


def feature_importance(X: np.ndarray, y: np.ndarray, params: ForestParams, n_jobs: int = 1) -> np.ndarray:
    """Normalized impurity importances of a forest trained with `params` (use n_trees=250 for selection)."""
    return train_forest(X, y, params, n_jobs).feature_importances()


def rank_features(importances: np.ndarray) -> list[int]:
    """Feature indices by importance, descending; ties go to the lower index."""
    return sorted(range(len(importances)), key=lambda i: (-importances[i], i))


class Selection(NamedTuple):
    mask: tuple[int, ...]  # selected feature indices, in rank order
    curve: tuple[float, ...]  # out-of-bag weighted F1 for k = 1..k_max


def select_features(
    X: np.ndarray, y: np.ndarray, importances: np.ndarray, params: ForestParams, k_max: int = 8, n_jobs: int = 1
) -> Selection:
    """Top-k features by importance, k maximizing out-of-bag weighted F1; smaller k wins ties."""
    ranking = rank_features(importances)
    curve = []
    for k in range(1, k_max + 1):
        forest = train_forest(X[:, ranking[:k]], y, params, n_jobs)
        votes, scored = forest.oob_votes(X[:, ranking[:k]])
        curve.append(weighted_f1(votes[scored] >= 0.5, y[scored]) if scored.any() else 0.0)
    best = int(np.argmax(curve))
    return Selection(tuple(ranking[: best + 1]), tuple(curve))


@dataclass(frozen=True)
class TypeModel:
    mask: tuple[int, ...]
    forest: Forest
    threshold: float = 0.5
    curve: tuple[float, ...] = ()

    def votes(self, X: np.ndarray) -> np.ndarray:
        return self.forest.votes(np.asarray(X, dtype=np.float64)[:, list(self.mask)])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.votes(X) >= self.threshold

    def to_json(self) -> dict:
        return {
            "mask": [FEATURE_NAMES[i] for i in self.mask],
            "threshold": self.threshold,
            "oob_curve": list(self.curve),
            "forest": self.forest.to_json(),
        }

    @classmethod
    def from_json(cls, record: dict) -> TypeModel:
        return cls(
            mask=tuple(FEATURE_NAMES.index(name) for name in record["mask"]),
            forest=Forest.from_json(record["forest"]),
            threshold=float(record["threshold"]),
            curve=tuple(record.get("oob_curve", ())),
        )


def train_type(
    X: np.ndarray,
    y: np.ndarray,
    params: LearnerParams,
    seed: np.random.SeedSequence,
    mask: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> TypeModel:
    """Balance, select (unless `mask` is fixed) and train one one-vs-all model."""
    smote_seed, selector_seed, forest_seed = seed.spawn(3)
    X_bal, y_bal = balance(X, y, np.random.default_rng(smote_seed), params.smote_k)
    curve: tuple[float, ...] = ()
    if mask is None:
        selector = replace(params.forest, n_trees=params.selector_trees, seed=_seed_int(selector_seed))
        importances = feature_importance(X_bal, y_bal, selector, n_jobs)
        curve_params = replace(params.forest, seed=selector.seed)
        mask, curve = select_features(X_bal, y_bal, importances, curve_params, params.k_max, n_jobs)
    forest_params = replace(params.forest, seed=_seed_int(forest_seed))
    forest = train_forest(X_bal[:, list(mask)], y_bal, forest_params, n_jobs)
    return TypeModel(tuple(mask), forest, params.threshold, curve)


@dataclass(frozen=True)
class BuStopModel:
    params: LearnerParams
    models: dict[StayType, TypeModel] = field(default_factory=dict)

    def __post_init__(self):
        assert set(self.models) == set(StayType), "one model per stay type"
        assert all(m.mask for m in self.models.values()), "masks must be non-empty"

    def votes(self, X: np.ndarray) -> dict[StayType, np.ndarray]:
        return {t: self.models[t].predict(X) for t in StayType}

    def to_json(self) -> dict:
        return {
            "params": {
                "forest": self.params.forest.to_json(),
                "selector_trees": self.params.selector_trees,
                "k_max": self.params.k_max,
                "smote_k": self.params.smote_k,
                "threshold": self.params.threshold,
                "seed": self.params.seed,
            },
            "models": {t.value: self.models[t].to_json() for t in StayType},
        }

    @classmethod
    def from_json(cls, record: dict) -> BuStopModel:
        p = dict(record["params"])
        p["forest"] = ForestParams(**p["forest"])
        models = {StayType(k): TypeModel.from_json(v) for k, v in record["models"].items()}
        if missing := [t.value for t in StayType if t not in models]:
            raise ValueError(f"no model for {', '.join(missing)}")
        if empty := [t.value for t, m in models.items() if not m.mask]:
            raise ValueError(f"empty feature mask for {', '.join(empty)}")
        return cls(LearnerParams(**p), models)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> BuStopModel:
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError, TypeError, AssertionError) as e:
            raise BustopError(f"cannot load model {path}: {e}") from e


def check_support(dataset: Dataset, needed: int, both_classes: bool = False) -> None:
    for stay_type in StayType:
        positives = int(dataset.binarize(stay_type).sum())
        if positives < needed:
            raise InsufficientClassSupport(stay_type, positives, needed)
        if both_classes and len(dataset) - positives < needed:
            raise InsufficientClassSupport(stay_type, len(dataset) - positives, needed, "negative")


def train_bustop(dataset: Dataset, params: LearnerParams = LearnerParams(), n_jobs: int = 1) -> BuStopModel:
    check_support(dataset, 2)
    X = dataset.X
    seeds = np.random.SeedSequence(params.seed).spawn(len(StayType))
    models = {}
    for stay_type, seed in zip(StayType, seeds):
        models[stay_type] = train_type(X, dataset.binarize(stay_type), params, seed, n_jobs=n_jobs)
        logger.info(f"{stay_type}: selected {[FEATURE_NAMES[i] for i in models[stay_type].mask]}")
    return BuStopModel(params, models)


def aggregate(positives: Mapping[StayType, bool]) -> frozenset[StayType]:
    """Combine per-type decisions: regular types win, AdHoc otherwise (including the all-negative case)."""
    regular = frozenset(t for t in StayType if t is not StayType.AD_HOC and positives[t])
    return regular or frozenset({StayType.AD_HOC})


def predict_many(model: BuStopModel, X: np.ndarray) -> list[frozenset[StayType]]:
    votes = model.votes(np.atleast_2d(X))
    return [aggregate({t: bool(votes[t][i]) for t in StayType}) for i in range(len(np.atleast_2d(X)))]


def predict_stay_types(model: BuStopModel, fv: FeatureVector) -> frozenset[StayType]:
    return predict_many(model, fv.as_array()[None, :])[0]


@dataclass(frozen=True)
class TypeScore:
    mean: float
    sd: float
    scores: tuple[float, ...]
    confusion: Confusion


@dataclass(frozen=True)
class CvReport:
    folds: int
    repeats: int
    per_type: dict[StayType, TypeScore]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"type": t.value, "f1_mean": s.mean, "f1_sd": s.sd, **s.confusion._asdict()}
                for t, s in self.per_type.items()
            ]
        )


def stratified_folds(y: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per row: each class shuffled and dealt round-robin, continuing across classes."""
    fold_of = np.empty(len(y), dtype=np.int64)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == 1)), rng.permutation(np.flatnonzero(y == 0))])
    fold_of[order] = np.arange(len(order)) % folds
    return fold_of


def _fold_unit(
    X: np.ndarray,
    y: np.ndarray,
    test: np.ndarray,
    params: LearnerParams,
    seed: np.random.SeedSequence,
    mask: Sequence[int] | None,
) -> tuple[float, Confusion]:
    model = train_type(X[~test], y[~test], params, seed, mask)
    predicted = model.predict(X[test])
    return weighted_f1(predicted, y[test]), Confusion.of(predicted, y[test])


def cross_validate(
    dataset: Dataset,
    params: LearnerParams = LearnerParams(),
    folds: int = 5,
    repeats: int = 10,
    mask: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> CvReport:
    """Repeated stratified k-fold CV of each one-vs-all task.

    Each type is partitioned on its own binary labels. The whole per-type pipeline (SMOTE,
    selection unless `mask` is fixed, training) runs on the training folds only.
    """
    check_support(dataset, folds, both_classes=True)
    X = dataset.X
    units = []
    for repeat_seed in np.random.SeedSequence(params.seed).spawn(repeats):
        for stay_type, type_seed in zip(StayType, repeat_seed.spawn(len(StayType))):
            partition_seed, *fold_seeds = type_seed.spawn(folds + 1)
            y = dataset.binarize(stay_type)
            fold_of = stratified_folds(y, folds, np.random.default_rng(partition_seed))
            units += [(stay_type, y, fold_of == f, s) for f, s in enumerate(fold_seeds)]
    results = Parallel(n_jobs=n_jobs)(delayed(_fold_unit)(X, y, test, params, s, mask) for _, y, test, s in units)
    scores: dict[StayType, list[float]] = defaultdict(list)
    confusion: dict[StayType, Confusion] = defaultdict(lambda: Confusion(0, 0, 0, 0))
    for (stay_type, *_), (score, counts) in zip(units, results):
        scores[stay_type].append(score)
        confusion[stay_type] = confusion[stay_type] + counts
    per_type = {
        t: TypeScore(
            float(np.mean(scores[t])),
            float(np.std(scores[t], ddof=1)) if len(scores[t]) > 1 else 0.0,
            tuple(scores[t]),
            confusion[t],
        )
        for t in StayType
    }
    summary = ", ".join(f"{t}={s.mean:.3f}±{s.sd:.3f}" for t, s in per_type.items())
    logger.info(f"{folds}x{repeats} CV: {summary}")
    return CvReport(folds, repeats, per_type)


def ablate_feature_groups(
    dataset: Dataset, params: LearnerParams = LearnerParams(), folds: int = 5, repeats: int = 10, n_jobs: int = 1
) -> dict[str, CvReport]:
    """CV with the spatial, temporal and full feature groups as fixed masks."""
    return {
        group: cross_validate(dataset, params, folds, repeats, mask=mask, n_jobs=n_jobs)
        for group, mask in FEATURE_GROUPS.items()
    }


def holdout_split(dataset: Dataset, test_fraction: float = 0.3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split stratified by joint label set: round(test_fraction·n) of each label set goes to test."""
    assert 0 < test_fraction < 1
    groups: dict[str, list[int]] = defaultdict(list)
    for i, record in enumerate(dataset.records):
        groups[StayType.format_set(record.labels)].append(i)
    rng = np.random.default_rng(seed)
    test: list[int] = []
    for key in sorted(groups):
        shuffled = rng.permutation(groups[key])
        test += shuffled[: round(test_fraction * len(shuffled))].tolist()
    held = set(test)
    train = [i for i in range(len(dataset)) if i not in held]
    return dataset.subset(train), dataset.subset(sorted(held))


def evaluate_holdout(model: BuStopModel, dataset: Dataset) -> dict[StayType, float]:
    """Per-type weighted F1 of the aggregated type-set predictions."""
    predicted = predict_many(model, dataset.X)
    return {
        t: weighted_f1([t in p for p in predicted], dataset.binarize(t).astype(bool)) for t in StayType
    }


def topk_curves(model: BuStopModel) -> pd.DataFrame:
    """Out-of-bag weighted F1 against k for each type's selector."""
    rows = [
        {"type": t.value, "k": k, "oob_f1": f1} for t in StayType for k, f1 in enumerate(model.models[t].curve, 1)
    ]
    return pd.DataFrame(rows, columns=["type", "k", "oob_f1"])
