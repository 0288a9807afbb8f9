"""Regression forests with out-of-bag permutation importance, one forest per
grid cell, aggregated into importance tensors and used to choose look-back
windows."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import CALENDAR, CATEGORIES, SPATIAL, WEATHER

CATEGORY_LABELS = {
    "d": "demand intensity",
    "tau": "travel time rate",
    "h": "time-of-day",
    "w": "day-of-week",
    "at": "temperature",
    "ah": "humidity",
    "as": "weather state",
    "aw": "wind speed",
    "av": "visibility",
}


# -- trees -----------------------------------------------------------------------


@dataclass
class RegressionTree:
    """Array-backed binary tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[np.nonzero(active)[0], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.value[node]

    def used_features(self) -> np.ndarray:
        return np.unique(self.feature[self.feature >= 0])

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """Variance-reduction split over ``features``.

    Returns ``(gain, feature, threshold)`` or ``None`` when no split leaves at
    least ``min_leaf`` samples on both sides. Thresholds are midpoints between
    consecutive distinct values; equal gains go to the lowest feature, then the
    lowest threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    features = np.sort(np.asarray(features, dtype=int))
    Xs = X[:, features]
    order = np.argsort(Xs, axis=0, kind="stable")
    xs = np.take_along_axis(Xs, order, axis=0)
    ys = y[order]
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    total, total_sq = csum[-1], csq[-1]
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    sse_left = csq[:-1] - csum[:-1] ** 2 / n_left
    sse_right = (total_sq - csq[:-1]) - (total - csum[:-1]) ** 2 / n_right
    parent = total_sq - total ** 2 / n
    gain = parent - sse_left - sse_right
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    if not best > 0:
        return None
    # tolerate round-off when comparing gains
    tol = 1e-12 * max(1.0, abs(float(parent[0])))
    rows, cols = np.nonzero(gain >= best - tol)
    thresholds = 0.5 * (xs[rows, cols] + xs[rows + 1, cols])
    pick = np.lexsort((thresholds, features[cols]))[0]
    return float(gain[rows[pick], cols[pick]]), int(features[cols[pick]]), float(thresholds[pick])


def fit_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int | None = None,
             max_depth: int = 12, min_samples_leaf: int = 5) -> RegressionTree:
    """CART regression tree; ``max_features`` candidates are drawn per node."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    m = p if max_features is None else max(1, min(p, max_features))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        yy = y[idx]
        value.append(float(yy[0]) if (yy == yy[0]).all() else float(yy.mean()))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < 2 * min_samples_leaf:
            continue
        yy = y[idx]
        if (yy == yy[0]).all():
            continue
        cand = rng.choice(p, size=m, replace=False) if m < p else np.arange(p)
        split = best_split(X[idx], yy, cand, min_samples_leaf)
        if split is None:
            continue
        _, f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        l_node = new_node(li)
        r_node = new_node(ri)
        left[node], right[node] = l_node, r_node
        stack.append((r_node, ri, depth + 1))
        stack.append((l_node, li, depth + 1))
    return RegressionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value))


# -- forests ---------------------------------------------------------------------


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid forest configuration")


@dataclass
class RandomForest:
    trees: list[RegressionTree]
    bootstrap: list[np.ndarray]
    oob: list[np.ndarray]
    n_samples: int
    n_features: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        preds = np.stack([t.predict(X) for t in self.trees])
        mean = preds.mean(axis=0)
        # keep exact values when every tree agrees (mean of equal floats can drift)
        agree = (preds == preds[0]).all(axis=0)
        return np.where(agree, preds[0], mean)


def fit_forest(X, y, n_trees: int = 100, seed: int = 0, *, max_depth: int = 12,
               min_samples_leaf: int = 5, bootstrap: bool = True,
               max_features: int | None = None, seed_path: Sequence[int] = ()) -> RandomForest:
    """Bagged CART trees with ceil(p/3) candidate features per split.

    Tree ``k`` draws from a generator seeded by ``(seed, *seed_path, k)`` so the
    result does not depend on fitting order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be an n x p matrix aligned with labels")
    n, p = X.shape
    if n < 2 or p < 1:
        raise ValueError("need at least 2 samples and 1 feature")
    if n_trees < 1:
        raise ValueError("need at least one tree")
    m = math.ceil(p / 3) if max_features is None else max_features
    trees, boots, oobs = [], [], []
    for k in range(n_trees):
        rng = np.random.default_rng([seed, *seed_path, k])
        if bootstrap:
            boot = rng.integers(0, n, n)
        else:
            boot = np.arange(n)
        in_bag = np.zeros(n, dtype=bool)
        in_bag[boot] = True
        trees.append(fit_tree(X[boot], y[boot], rng, m, max_depth, min_samples_leaf))
        boots.append(boot)
        oobs.append(np.nonzero(~in_bag)[0])
    return RandomForest(trees, boots, oobs, n, p)


def oob_error(forest: RandomForest, k: int, X, y) -> float:
    """Mean squared error of tree ``k`` over its own out-of-bag samples.

    Returns NaN when the out-of-bag set is empty.
    """
    o = forest.oob[k]
    if len(o) == 0:
        return math.nan
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    r = forest.trees[k].predict(X[o]) - y[o]
    return float(np.mean(r * r))


def permutation_importance(forest: RandomForest, X, y, seed: int = 0,
                           seed_path: Sequence[int] = ()) -> np.ndarray:
    """Mean over trees of the OOB error increase after shuffling each feature
    within the tree's OOB set. Features a tree never splits on contribute
    exactly 0 for that tree; trees with empty OOB sets are skipped."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    vi = np.zeros(forest.n_features)
    used_trees = 0
    for k, tree in enumerate(forest.trees):
        o = forest.oob[k]
        if len(o) == 0:
            continue
        used_trees += 1
        Xo = X[o]
        yo = y[o]
        base = float(np.mean((tree.predict(Xo) - yo) ** 2))
        rng = np.random.default_rng([seed, *seed_path, k])
        for j in tree.used_features():
            Xp = Xo.copy()
            Xp[:, j] = Xo[rng.permutation(len(o)), j]
            vi[j] += float(np.mean((tree.predict(Xp) - yo) ** 2)) - base
    return vi / used_trees if used_trees else vi


# -- feature layout --------------------------------------------------------------


def category_size(category: str, grid: tuple[int, int]) -> int:
    return grid[0] * grid[1] if category in SPATIAL else 1


def count_feature_dimension(grid: tuple[int, int], windows: Mapping[str, int]) -> int:
    """Scalar predictors per observation for the given category windows."""
    return sum(k * category_size(c, grid) for c, k in windows.items())


def category_lags(category: str, K: int) -> np.ndarray:
    """Offsets back from the target time: 1..K, or 0..K-1 for calendar variables."""
    return np.arange(0, K) if category in CALENDAR else np.arange(1, K + 1)


@dataclass(frozen=True)
class FeatureLayout:
    """Flat index of (category, lag, source cell); category-major, then lag, then cell."""

    grid: tuple[int, int]
    windows: tuple[tuple[str, int], ...]

    @classmethod
    def build(cls, grid, windows: Mapping[str, int]) -> "FeatureLayout":
        order = tuple((c, int(windows[c])) for c in CATEGORIES if c in windows)
        return cls(tuple(grid), order)

    @property
    def size(self) -> int:
        return count_feature_dimension(self.grid, dict(self.windows))

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for c, K in self.windows:
            n = K * category_size(c, self.grid)
            out[c] = slice(start, start + n)
            start += n
        return out

    def first_target(self) -> int:
        return max((int(category_lags(c, K).max()) for c, K in self.windows), default=0)

    def matrix(self, variables: Mapping[str, np.ndarray], targets) -> np.ndarray:
        """Feature rows for target indices ``targets``."""
        targets = np.asarray(targets, dtype=int)
        if len(targets) and targets.min() < self.first_target():
            raise ValueError(f"targets need {self.first_target()} steps of history")
        blocks = []
        for c, K in self.windows:
            lags = category_lags(c, K)
            x = np.asarray(variables[c], dtype=float)
            vals = x[targets[:, None] - lags[None, :]]  # (n, K) or (n, K, I, J)
            blocks.append(vals.reshape(len(targets), -1))
        return np.concatenate(blocks, axis=1) if blocks else np.zeros((len(targets), 0))


# -- spatial forest --------------------------------------------------------------


@dataclass
class SpatialForest:
    grid: tuple[int, int]
    layout: FeatureLayout
    forests: list[RandomForest]  # row-major over target cells
    X: np.ndarray
    labels: np.ndarray  # (n, I*J)
    targets: np.ndarray
    config: ForestConfig
    importances: np.ndarray | None = None  # (I*J, p) raw permutation importances

    def forest(self, i: int, j: int) -> RandomForest:
        return self.forests[i * self.grid[1] + j]

    def compute_importance(self) -> np.ndarray:
        if self.importances is None:
            self.importances = np.stack([
                permutation_importance(f, self.X, self.labels[:, c], self.config.seed, (c,))
                for c, f in enumerate(self.forests)
            ])
        return self.importances


def fit_spatial(variables: Mapping[str, np.ndarray], K_lookback: int | Mapping[str, int],
                config: ForestConfig | None = None, targets=None,
                categories: Sequence[str] = CATEGORIES) -> SpatialForest:
    """One forest per target cell on the full lagged feature vector.

    ``variables`` maps category names to standardized series ((T, I, J) for
    demand and ttr, (T,) otherwise). ``targets`` defaults to every index with
    a full window.
    """
    config = config or ForestConfig()
    demand = np.asarray(variables["d"], dtype=float)
    T, I, J = demand.shape
    windows = (K_lookback if isinstance(K_lookback, Mapping)
               else {c: int(K_lookback) for c in categories})
    layout = FeatureLayout.build((I, J), windows)
    if targets is None:
        targets = np.arange(layout.first_target(), T)
    targets = np.asarray(targets, dtype=int)
    if len(targets) < 2:
        raise ValueError(f"series of {T} steps too short for the requested windows")
    X = layout.matrix(variables, targets)
    labels = demand[targets].reshape(len(targets), -1)
    forests = [
        fit_forest(X, labels[:, c], config.n_trees, config.seed, max_depth=config.max_depth,
                   min_samples_leaf=config.min_samples_leaf, bootstrap=config.bootstrap,
                   seed_path=(c,))
        for c in range(I * J)
    ]
    return SpatialForest((I, J), layout, forests, X, labels, targets, config)


# -- importance report -------------------------------------------------------------


@dataclass
class ImportanceReport:
    """Normalized importances (percent of the global total).

    ``tensors['d']`` and ``tensors['tau']`` are indexed (i', j', i, j, lag);
    the other categories (i', j', lag). Lag index 0 is the most recent step
    the category is observed at.
    """

    grid: tuple[int, int]
    windows: dict[str, int]
    tensors: dict[str, np.ndarray]
    floored: int = 0

    def category_totals(self) -> dict[str, float]:
        return {c: float(v.sum()) for c, v in self.tensors.items()}

    def lag_totals(self, category: str) -> np.ndarray:
        """Importance per lag, index 0 = most recent."""
        v = self.tensors[category]
        return v.reshape(-1, v.shape[-1]).sum(axis=0)

    def total(self) -> float:
        return float(sum(v.sum() for v in self.tensors.values()))

    def ranking(self) -> list[str]:
        totals = self.category_totals()
        return sorted(totals, key=lambda c: (-totals[c], CATEGORIES.index(c)))

    def table(self) -> tuple[list[str], list[str], list[list[str]]]:
        """Rows t-K..t by category columns; '-' where a category has no value."""
        K = max(self.windows.values())
        cats = [c for c in CATEGORIES if c in self.tensors]
        row_labels = [f"t-{k}" for k in range(K, 0, -1)] + ["t"]
        rows = []
        for k in range(K, -1, -1):
            row = []
            for c in cats:
                lags = category_lags(c, self.windows[c])
                hit = np.nonzero(lags == k)[0]
                row.append(f"{self.lag_totals(c)[hit[0]]:.4f}" if len(hit) else "-")
            rows.append(row)
        return row_labels, cats, rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# importance in percent of the total over all target-cell forests "
                  "(normalized globally after summing across forests; negative raw values floored at 0)\n")
        labels, cats, rows = self.table()
        buf.write("lag," + ",".join(cats) + "\n")
        for label, row in zip(labels, rows):
            buf.write(label + "," + ",".join(row) + "\n")
        buf.write("\ncategory,percent\n")
        for c, v in self.category_totals().items():
            buf.write(f"{c},{v:.6f}\n")
        return buf.getvalue()


def aggregate_importance(sf: SpatialForest) -> ImportanceReport:
    raw = sf.compute_importance()
    floored = int((raw < 0).sum())
    vals = np.maximum(raw, 0.0)
    total = vals.sum()
    if total > 0:
        vals = vals * (100.0 / total)
    I, J = sf.grid
    tensors = {}
    for c, sl in sf.layout.slices().items():
        K = dict(sf.layout.windows)[c]
        block = vals[:, sl]
        if c in SPATIAL:
            tensors[c] = block.reshape(I, J, K, I, J).transpose(0, 1, 3, 4, 2)
        else:
            tensors[c] = block.reshape(I, J, K)
    return ImportanceReport((I, J), dict(sf.layout.windows), tensors, floored)


def select_features(report: ImportanceReport | Mapping[str, Sequence[float]],
                    threshold: float = 3.0, coverage: float = 0.9) -> dict[str, int]:
    """Keep categories holding at least ``threshold`` percent of importance;
    for each, the smallest window (from the most recent lag) whose lags hold
    ``coverage`` of that category's importance.

    ``report`` may also be a mapping of category -> per-lag importances
    (index 0 most recent).
    """
    if isinstance(report, ImportanceReport):
        lags = {c: report.lag_totals(c) for c in report.tensors}
    else:
        lags = {c: np.asarray(v, dtype=float) for c, v in report.items()}
    total = sum(v.sum() for v in lags.values())
    out = {}
    for c in CATEGORIES:
        if c not in lags or total <= 0:
            continue
        v = lags[c]
        share = 100.0 * v.sum() / total
        if share < threshold or v.sum() <= 0:
            continue
        cum = np.cumsum(v) / v.sum()
        out[c] = int(np.searchsorted(cum, coverage - 1e-12) + 1)
    return out
