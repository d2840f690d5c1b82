"""Gradient-boosted regression trees over pairwise architecture differences,
and permutation importance of each architectural component."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from archsim import rng as rngmod
from archsim.features import COMPONENTS, ArchFeatureRecord, hamming_diff

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairFeatureRow:
    pair: tuple[str, str]
    diff: np.ndarray
    target: float


def pair_rows(records: Mapping[str, ArchFeatureRecord], sm) -> list[PairFeatureRow]:
    """One row per comparable model pair of a SimilarityMatrix."""
    rows = []
    for i, j, value in sm.pairs():
        a, b = sm.model_names[i], sm.model_names[j]
        rows.append(PairFeatureRow((a, b), hamming_diff(records[a], records[b]), value))
    return rows


def rows_to_arrays(rows: Sequence[PairFeatureRow]):
    X = np.array([r.diff for r in rows], dtype=np.float64).reshape(len(rows), -1)
    y = np.array([r.target for r in rows], dtype=np.float64)
    return X, y


@dataclass(frozen=True)
class GbmConfig:
    stages: int = 500
    max_depth: int = 12
    min_samples_split: int = 4
    min_samples_leaf: int = 1
    learning_rate: float = 0.02
    loss: str = "squared-error"
    seed: int = 0

    def __post_init__(self):
        if min(self.stages, self.max_depth, self.min_samples_split, self.min_samples_leaf) <= 0:
            raise ValueError("GBM sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss != "squared-error":
            raise ValueError("only squared-error loss is supported")


@dataclass
class Tree:
    feature: np.ndarray    # -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}


def _best_split(X, y, idx, min_leaf):
    """Best (gain, feature, threshold) by SSE reduction; ties keep the first found."""
    n = len(idx)
    ys = y[idx]
    total, total_sq = ys.sum(), (ys * ys).sum()
    parent_sse = total_sq - total * total / n
    best = (0.0, -1, 0.0)
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted, y_sorted = xs[order], ys[order]
        csum = np.cumsum(y_sorted)[:-1]
        csq = np.cumsum(y_sorted * y_sorted)[:-1]
        nl = np.arange(1, n)
        nr = n - nl
        valid = (xs_sorted[1:] > xs_sorted[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        sse = (csq - csum**2 / nl) + ((total_sq - csq) - (total - csum) ** 2 / nr)
        gain = np.where(valid, parent_sse - sse, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12 * max(1.0, abs(parent_sse)):
            best = (float(gain[k]), f, 0.5 * (xs_sorted[k] + xs_sorted[k + 1]))
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_samples_split: int,
             min_samples_leaf: int = 1) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def build(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        if depth >= max_depth or len(idx) < min_samples_split:
            return node
        gain, f, thr = _best_split(X, y, idx, min_samples_leaf)
        if f < 0 or gain <= 0:
            return node
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(len(y)), 0)
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value))


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


@dataclass
class GbmRegressor:
    config: GbmConfig
    init: float
    trees: list[Tree] = field(default_factory=list)
    train_r2: float = float("nan")

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.init)
        for t in self.trees:
            out += self.config.learning_rate * t.predict(X)
        return out

    def score(self, X, y) -> float:
        return r2_score(np.asarray(y, dtype=np.float64), self.predict(X))

    def used_features(self) -> set[int]:
        return set().union(*(t.used_features() for t in self.trees)) if self.trees else set()


def fit_gbm(rows, cfg: GbmConfig = GbmConfig(), y=None) -> GbmRegressor:
    """Stagewise squared-error boosting with shrinkage.

    ``rows`` is a sequence of PairFeatureRow, or a feature matrix when ``y`` is given.
    """
    if y is None:
        X, y = rows_to_arrays(rows)
    else:
        X, y = np.asarray(rows, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(y) < 30:
        raise ValueError(f"need at least 30 rows, got {len(y)}")
    model = GbmRegressor(cfg, float(y.mean()))
    if np.all(y == y[0]):
        warnings.warn("constant target: boosting fits no trees", RuntimeWarning, stacklevel=2)
        model.train_r2 = 1.0
        return model
    pred = np.full(len(y), model.init)
    for _ in range(cfg.stages):
        tree = fit_tree(X, y - pred, cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf)
        model.trees.append(tree)
        pred += cfg.learning_rate * tree.predict(X)
    model.train_r2 = r2_score(y, pred)
    return model


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # lexsort keys are last-primary: column 0 first, the target breaks full ties
    return np.lexsort((y,) + tuple(X.T[::-1]))


def permutation_importance(model: GbmRegressor, rows, repeats: int = 10, seed: int = 0, y=None,
                           permutations=None) -> np.ndarray:
    """Mean drop in R^2 when each feature column is shuffled, over ``repeats`` shuffles.

    Rows are put in a canonical order first so the result does not depend on
    the order they were supplied in.  ``permutations`` (optional, shape
    ``(features, repeats, n)``) overrides the seeded shuffles.
    """
    if y is None:
        X, y = rows_to_arrays(rows)
    else:
        X, y = np.asarray(rows, dtype=np.float64), np.asarray(y, dtype=np.float64)
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    base = model.score(X, y)
    n, d = X.shape
    out = np.zeros(d)
    for f in range(d):
        drops = []
        for r in range(repeats):
            perm = (permutations[f][r] if permutations is not None
                    else rngmod.stream(seed, "permutation", f, r).permutation(n))
            Xp = X.copy()
            Xp[:, f] = X[perm, f]
            drops.append(base - model.score(Xp, y))
        out[f] = float(np.mean(drops))
    return out


def importance_table(scores: np.ndarray) -> list[tuple[str, float]]:
    """(component, score) sorted by descending importance, ties by component order."""
    return sorted(zip(COMPONENTS, map(float, scores)), key=lambda t: -t[1])


def all_pairs(names: Sequence[str]):
    return list(combinations(names, 2))
