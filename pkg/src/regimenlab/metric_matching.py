"""Honest-split distance-metric learning and matched-group construction.

The metric is a diagonal quadratic form whose weights are the impurity
importances of a gradient-boosted ensemble of depth-2 regression trees
predicting outcomes from matching features. Learning happens on a dedicated
fold so estimation outcomes never leak into the metric ("honest" splitting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOOST_ROUNDS = 100
BOOST_LR = 0.1
MIN_TRAIN_ROWS = 20
_GAIN_TOL = 1e-12


class InsufficientGoodNeighborsError(ValueError):
    """Raised when a filtered k-NN query cannot find k good-outcome candidates."""

    def __init__(self, requested: int, available: int):
        self.shortfall = requested - available
        super().__init__(
            f"needed {requested} good-outcome candidates, found {available} "
            f"(short by {self.shortfall})"
        )


# ---------------------------------------------------------------------------
# Boosted depth-2 regression trees (squared loss, exact greedy splits)
# ---------------------------------------------------------------------------

def _best_split(X: np.ndarray, y: np.ndarray) -> tuple[int, float, float] | None:
    """Exact greedy split of a node: (feature, threshold, sse_reduction).

    For every feature, candidate thresholds are midpoints between consecutive
    distinct sorted values; the score is the squared-error reduction
    sum(y)^2/n terms rearranged so only cumulative sums are needed.
    """
    m = len(y)
    if m < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ys = y[order]
    csum = np.cumsum(ys, axis=0)
    total = csum[-1, 0]
    left_n = np.arange(1, m)[:, None]
    left_sum = csum[:-1]
    gain = left_sum**2 / left_n + (total - left_sum) ** 2 / (m - left_n)
    gain -= total**2 / m
    gain[xs[1:] <= xs[:-1]] = -np.inf  # cannot split between equal values
    flat = int(np.argmax(gain))
    i, j = flat // gain.shape[1], flat % gain.shape[1]
    if not np.isfinite(gain[i, j]) or gain[i, j] <= _GAIN_TOL:
        return None
    threshold = 0.5 * (xs[i, j] + xs[i + 1, j])
    return j, float(threshold), float(gain[i, j])


@dataclass
class _Tree:
    """Depth-2 tree: root split, optional child splits, four leaf means."""

    feature: int
    threshold: float
    child: list  # per side: (feature, threshold, lo_value, hi_value) or (None, value)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        left = X[:, self.feature] <= self.threshold
        for side, mask in ((0, left), (1, ~left)):
            spec = self.child[side]
            if spec[0] is None:
                out[mask] = spec[1]
            else:
                f, thr, lo, hi = spec
                sub = X[mask, f] <= thr
                vals = np.where(sub, lo, hi)
                out[mask] = vals
        return out


def _fit_tree(X: np.ndarray, resid: np.ndarray,
              importances: np.ndarray) -> _Tree | None:
    root = _best_split(X, resid)
    if root is None:
        return None
    feature, threshold, gain = root
    importances[feature] += gain
    child = []
    left_mask = X[:, feature] <= threshold
    for mask in (left_mask, ~left_mask):
        sub = _best_split(X[mask], resid[mask])
        if sub is None:
            child.append((None, float(np.mean(resid[mask]))))
        else:
            f, thr, g = sub
            importances[f] += g
            inner = X[mask, f] <= thr
            child.append((f, thr,
                          float(np.mean(resid[mask][inner])),
                          float(np.mean(resid[mask][~inner]))))
    return _Tree(feature=feature, threshold=threshold, child=child)


@dataclass
class BoostedTrees:
    """Gradient-boosted depth-2 regression trees with impurity importances."""

    rounds: int = BOOST_ROUNDS
    learning_rate: float = BOOST_LR
    base_value: float = 0.0
    trees: list[_Tree] = field(default_factory=list)
    importances: np.ndarray | None = None
    train_mse_path: list[float] = field(default_factory=list)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "BoostedTrees":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.base_value = float(np.mean(y))
        self.importances = np.zeros(X.shape[1])
        pred = np.full(len(y), self.base_value)
        self.trees = []
        self.train_mse_path = []
        for _ in range(self.rounds):
            tree = _fit_tree(X, y - pred, self.importances)
            if tree is None:
                break  # residuals no longer separable; further rounds are no-ops
            self.trees.append(tree)
            pred += self.learning_rate * tree.predict(X)
            self.train_mse_path.append(float(np.mean((y - pred) ** 2)))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        pred = np.full(len(X), self.base_value)
        for tree in self.trees:
            pred += self.learning_rate * tree.predict(X)
        return pred


# ---------------------------------------------------------------------------
# Distance metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceMetric:
    """Nonnegative diagonal weights over the matching-feature dimensions."""

    weights: np.ndarray
    uniform_fallback: bool = False  # outcomes carried no signal; weights are flat

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if np.any(self.weights < 0.0) or not np.any(self.weights > 0.0):
            raise ValueError("weights must be nonnegative with at least one positive")

    def distance(self, v_a: np.ndarray, v_b: np.ndarray) -> float:
        diff = np.asarray(v_a, dtype=float) - np.asarray(v_b, dtype=float)
        return float(np.sum(self.weights * diff * diff))

    def distances_to(self, v: np.ndarray, others: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(others) - np.asarray(v, dtype=float)
        return diff * diff @ self.weights


def learn_metric(V: np.ndarray, y: np.ndarray,
                 rounds: int = BOOST_ROUNDS, learning_rate: float = BOOST_LR) -> DistanceMetric:
    """Fit the boosted ensemble on (V, y) and normalize its importances.

    Weight j is the total variance reduction attributed to feature j across
    all splits, scaled to sum to 1. Constant outcomes admit no splits, so the
    metric degrades to uniform weights and is flagged.
    """
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    if V.ndim != 2 or V.shape[1] < 1:
        raise ValueError("V must be 2-d with at least one feature")
    if len(V) < MIN_TRAIN_ROWS:
        raise ValueError(f"need at least {MIN_TRAIN_ROWS} training rows, got {len(V)}")
    if not np.all(np.isfinite(V)):
        raise ValueError("matching features must be finite")
    booster = BoostedTrees(rounds=rounds, learning_rate=learning_rate).fit(V, y)
    total = float(np.sum(booster.importances))
    if total <= 0.0:
        k = V.shape[1]
        return DistanceMetric(weights=np.full(k, 1.0 / k), uniform_fallback=True)
    return DistanceMetric(weights=booster.importances / total)


def distance(metric: DistanceMetric, v_a: np.ndarray, v_b: np.ndarray) -> float:
    return metric.distance(v_a, v_b)


# ---------------------------------------------------------------------------
# Folds and matching
# ---------------------------------------------------------------------------

def honest_folds(n: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random fold assignment (sizes differ by at most one)."""
    if n < folds:
        raise ValueError(f"need at least {folds} rows for {folds} folds")
    assignment = np.empty(n, dtype=int)
    assignment[rng.permutation(n)] = np.arange(n) % folds
    return assignment


@dataclass(frozen=True)
class MatchedGroup:
    """Neighbors of one center, ascending by distance (ties by lower id)."""

    center_id: int
    neighbor_ids: np.ndarray
    distances: np.ndarray
    k: int | None
    caliper: float | None
    good_only: bool

    def __len__(self) -> int:
        return len(self.neighbor_ids)


def match(center_id: int, center_v: np.ndarray, ids: np.ndarray, V: np.ndarray,
          y: np.ndarray, metric: DistanceMetric, k: int | None = None,
          caliper: float | None = None, filter_good: bool = False) -> MatchedGroup:
    """Matched group for one center from a candidate pool.

    Exactly one of `k` (nearest neighbors) or `caliper` (all within r) must
    be given. With `filter_good`, only candidates with y == 0 qualify; a k-NN
    query that cannot fill k then raises with the shortfall. Ties break
    toward the lower patient id for deterministic replay.
    """
    if (k is None) == (caliper is None):
        raise ValueError("specify exactly one of k or caliper")
    ids = np.asarray(ids)
    keep = ids != center_id
    if filter_good:
        keep &= np.asarray(y) == 0
    cand_ids = ids[keep]
    dists = metric.distances_to(center_v, np.asarray(V, dtype=float)[keep])
    order = np.lexsort((cand_ids, dists))
    cand_ids, dists = cand_ids[order], dists[order]
    if k is not None:
        if len(cand_ids) < k:
            raise InsufficientGoodNeighborsError(k, len(cand_ids))
        cand_ids, dists = cand_ids[:k], dists[:k]
    else:
        inside = dists <= caliper
        cand_ids, dists = cand_ids[inside], dists[inside]
    return MatchedGroup(center_id=center_id, neighbor_ids=cand_ids, distances=dists,
                        k=k, caliper=caliper, good_only=filter_good)


# ---------------------------------------------------------------------------
# Audit exports
# ---------------------------------------------------------------------------

def export_metric(metric: DistanceMetric, feature_names: list[str], path: Path) -> None:
    if len(feature_names) != len(metric.weights):
        raise ValueError("one name per weight required")
    lines = ["feature,weight"]
    lines += [f"{name},{w:.17g}" for name, w in zip(feature_names, metric.weights)]
    Path(path).write_text("\n".join(lines) + "\n")


def export_groups(groups: list[MatchedGroup], path: Path) -> None:
    lines = ["center,neighbor,distance"]
    for g in groups:
        lines += [f"{g.center_id},{nid},{d:.17g}"
                  for nid, d in zip(g.neighbor_ids, g.distances)]
    Path(path).write_text("\n".join(lines) + "\n")
