"""Nonnegative residual-magnitude surrogates.

Three interchangeable model variants drive the sampling optimizer:

* ``BoostedTreeModel`` -- least-squares gradient-boosted regression trees
  grown from scratch (exact greedy variance-reduction splits) with
  hyperparameters chosen by k-fold cross-validation on mean absolute error.
* ``ConstantModel`` -- a single nonnegative level, for ablations.
* ``ResidualOracle`` -- returns the exact realized absolute residual of its
  combination weights on any fully labeled dataset (simulation-only).

Predictions are clamped at zero: a residual magnitude is never negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .core import Dataset, SubsetKey
from .rng import stream


# ---------------------------------------------------------------------------
# regression trees


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Axis-aligned binary regression tree stored as flat node arrays.

    Splits are chosen by exact greedy variance reduction over thresholds at
    midpoints of consecutive distinct observed values; leaves hold the mean
    of their training targets.  ``feature[i] == -1`` marks node i as a leaf.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, max_depth: int,
            min_samples_leaf: int = 2) -> "RegressionTree":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on sample count")
        if max_depth < 0:
            raise ValueError("max_depth must be nonnegative")

        feature: list[int] = []
        threshold: list[float] = []
        left: list[int] = []
        right: list[int] = []
        value: list[float] = []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            return len(feature) - 1

        stack = [(np.arange(X.shape[0]), 0, new_node())]
        while stack:
            idx, depth, node = stack.pop()
            y_node = y[idx]
            value[node] = float(y_node.mean())
            if depth >= max_depth or idx.size < 2 * min_samples_leaf:
                continue
            split = _best_split(X[idx], y_node, min_samples_leaf)
            if split is None:
                continue
            j, thr = split
            go_left = X[idx, j] <= thr
            node_l, node_r = new_node(), new_node()
            feature[node] = j
            threshold[node] = thr
            left[node] = node_l
            right[node] = node_r
            stack.append((idx[go_left], depth + 1, node_l))
            stack.append((idx[~go_left], depth + 1, node_r))

        return cls(
            feature=np.array(feature, dtype=np.intp),
            threshold=np.array(threshold, dtype=float),
            left=np.array(left, dtype=np.intp),
            right=np.array(right, dtype=np.intp),
            value=np.array(value, dtype=float),
            max_depth=int(max_depth),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pos = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        for _ in range(self.max_depth + 1):
            feat = self.feature[pos]
            active = feat >= 0
            if not active.any():
                break
            xj = X[rows, np.where(active, feat, 0)]
            go_left = xj <= self.threshold[pos]
            nxt = np.where(go_left, self.left[pos], self.right[pos])
            pos = np.where(active, nxt, pos)
        return self.value[pos]

    @property
    def n_nodes(self) -> int:
        return self.feature.size


def _best_split(X: np.ndarray, y: np.ndarray, min_leaf: int) -> tuple[int, float] | None:
    """Exact greedy search over all features at once.

    Returns (feature, threshold) or None if no split reduces the total SSE.
    Ties are broken deterministically: first feature index, then lowest
    threshold.
    """
    m = y.size
    base_sse = float(((y - y.mean()) ** 2).sum())
    order = np.argsort(X, axis=0, kind="stable")  # m x d column-wise sort
    xs = np.take_along_axis(X, order, axis=0)
    ys = y[order]
    cs = np.cumsum(ys, axis=0)
    cs2 = np.cumsum(ys * ys, axis=0)
    k = np.arange(1, m)[:, None]  # left-child sizes
    valid = (xs[1:] > xs[:-1]) & (k >= min_leaf) & (m - k >= min_leaf)
    if not valid.any():
        return None
    sse_l = cs2[:-1] - cs[:-1] ** 2 / k
    sse_r = (cs2[-1] - cs2[:-1]) - (cs[-1] - cs[:-1]) ** 2 / (m - k)
    total = np.where(valid, sse_l + sse_r, np.inf)
    flat = int(np.argmin(total.T))  # feature-major: first feature wins ties,
    j, i = divmod(flat, m - 1)      # then the lowest threshold
    gain = base_sse - float(total[i, j])
    if gain <= 1e-12 * base_sse:  # scale-aware zero threshold
        return None
    return int(j), float(0.5 * (xs[i, j] + xs[i + 1, j]))


# ---------------------------------------------------------------------------
# gradient boosting


@dataclass(frozen=True, eq=False)
class BoostedTreeModel:
    """Least-squares boosted tree ensemble predicting a residual magnitude."""

    base: float
    trees: tuple[RegressionTree, ...]
    learning_rate: float
    depth: int
    n_features: int
    feature_cols: tuple[int, ...] | None = None
    cv_score: float = float("nan")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"model was fit on {self.n_features} features, got {X.shape[1]}")
        out = np.full(X.shape[0], self.base)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return np.maximum(out, 0.0)


def _boost(X: np.ndarray, y: np.ndarray, n_trees: int, depth: int,
           learning_rate: float) -> tuple[float, list[RegressionTree]]:
    base = float(y.mean())
    fit = np.full(y.shape, base)
    trees = []
    for _ in range(n_trees):
        tree = RegressionTree.fit(X, y - fit, depth)
        fit = fit + learning_rate * tree.predict(X)
        trees.append(tree)
    return base, trees


@dataclass(frozen=True)
class CvGrid:
    """Hyperparameter grid for the boosted surrogate; scoring is fixed to MAE."""

    n_trees_options: tuple[int, ...] = (25, 50, 100)
    depth_options: tuple[int, ...] = (2, 6, 8)
    learning_rate_options: tuple[float, ...] = (0.05, 0.1)
    folds: int = 3

    def __post_init__(self):
        if not (self.n_trees_options and self.depth_options and self.learning_rate_options):
            raise ValueError("all option lists must be non-empty")
        if any(t < 1 for t in self.n_trees_options) or any(d < 1 for d in self.depth_options):
            raise ValueError("tree counts and depths must be positive")
        if any(r <= 0 for r in self.learning_rate_options):
            raise ValueError("learning rates must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        object.__setattr__(self, "n_trees_options", tuple(sorted(self.n_trees_options)))
        object.__setattr__(self, "depth_options", tuple(sorted(self.depth_options)))
        object.__setattr__(self, "learning_rate_options",
                           tuple(sorted(self.learning_rate_options)))

    @property
    def size(self) -> int:
        return (len(self.n_trees_options) * len(self.depth_options)
                * len(self.learning_rate_options))

    def candidates(self) -> list[tuple[int, int, float]]:
        """All (n_trees, depth, learning_rate) cells in tie-break priority order."""
        return [(t, d, r) for t, d, r in product(
            self.n_trees_options, self.depth_options, self.learning_rate_options)]


def cross_validate_grid(features: np.ndarray, targets: np.ndarray, grid: CvGrid,
                        seed: int) -> dict[tuple[int, int, float], float]:
    """Mean held-out MAE for every grid cell.

    Folds are contiguous blocks of a seeded shuffle.  Because boosting with
    M trees is a prefix of boosting with M' > M trees, each (depth, rate)
    pair is fit once per fold to the largest tree count and scored at every
    requested count along the way.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    m = y.size
    perm = stream(seed, "cv-folds").permutation(m)
    folds = np.array_split(perm, grid.folds)
    max_trees = grid.n_trees_options[-1]
    counts = set(grid.n_trees_options)

    sums: dict[tuple[int, int, float], float] = {c: 0.0 for c in grid.candidates()}
    for fold in folds:
        val_mask = np.zeros(m, dtype=bool)
        val_mask[fold] = True
        X_tr, y_tr = X[~val_mask], y[~val_mask]
        X_va, y_va = X[val_mask], y[val_mask]
        for depth in grid.depth_options:
            for rate in grid.learning_rate_options:
                base = float(y_tr.mean())
                fit_tr = np.full(y_tr.shape, base)
                pred_va = np.full(y_va.shape, base)
                for t in range(1, max_trees + 1):
                    tree = RegressionTree.fit(X_tr, y_tr - fit_tr, depth)
                    fit_tr = fit_tr + rate * tree.predict(X_tr)
                    pred_va = pred_va + rate * tree.predict(X_va)
                    if t in counts:
                        mae = float(np.abs(np.maximum(pred_va, 0.0) - y_va).mean())
                        sums[(t, depth, rate)] += mae
    return {cfg: s / grid.folds for cfg, s in sums.items()}


def fit_uncertainty(features: np.ndarray, abs_residuals: np.ndarray, grid: CvGrid,
                    seed: int, feature_cols: tuple[int, ...] | None = None) -> BoostedTreeModel:
    """Cross-validate the grid, refit the winner on all rows.

    Score ties are broken toward simpler models: fewer trees, then shallower,
    then lower learning rate.  Deterministic given (features, residuals,
    grid, seed).
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(abs_residuals, dtype=float)
    if np.any(y < 0):
        raise ValueError("absolute residuals must be nonnegative")
    if y.size < grid.folds:
        raise ValueError(f"need at least {grid.folds} rows for {grid.folds}-fold CV, got {y.size}")

    if grid.size == 1:
        best = grid.candidates()[0]
        best_score = float("nan")
    else:
        scores = cross_validate_grid(X, y, grid, seed)
        best, best_score = None, np.inf
        for cfg in grid.candidates():  # candidates() is already in tie priority order
            if scores[cfg] < best_score:
                best, best_score = cfg, scores[cfg]

    n_trees, depth, rate = best
    base, trees = _boost(X, y, n_trees, depth, rate)
    return BoostedTreeModel(base=base, trees=tuple(trees), learning_rate=rate,
                            depth=depth, n_features=X.shape[1],
                            feature_cols=feature_cols, cv_score=float(best_score))


# ---------------------------------------------------------------------------
# degenerate variants


@dataclass(frozen=True)
class ConstantModel:
    """u(x) = value everywhere."""

    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("constant uncertainty must be nonnegative")

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.full(X.shape[0], self.value)


@dataclass(frozen=True, eq=False)
class ResidualOracle:
    """Returns the exact realized |y - w'f_I(x)| on any fully labeled dataset.

    Simulation-only: it reads labels directly, bypassing the label-collection
    budget, which is exactly what makes it useful for mechanism ablations.
    """

    weights: np.ndarray
    subset: SubsetKey

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    def residuals(self, data: Dataset) -> np.ndarray:
        if data.labels is None or not np.all(np.isfinite(data.labels)):
            raise ValueError("the residual oracle needs a fully labeled dataset")
        preds = data.predictor_matrix(self.subset) @ self.weights
        return np.abs(data.labels - preds)


# ---------------------------------------------------------------------------
# shared evaluation surface


def predict_u(model, x: np.ndarray) -> float:
    """Pointwise residual-magnitude prediction for covariate-based variants."""
    if isinstance(model, ResidualOracle):
        raise ValueError("the residual oracle evaluates labeled datasets; "
                         "use evaluate_uncertainty")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_u expects a single covariate vector")
    if isinstance(model, ConstantModel):
        return float(model.value)
    if isinstance(model, BoostedTreeModel):
        if model.feature_cols is not None:
            x = x[list(model.feature_cols)]
        return float(model.predict(x[None, :])[0])
    raise TypeError(f"unknown uncertainty model type {type(model).__name__}")


def evaluate_uncertainty(model, data: Dataset, subset: SubsetKey) -> np.ndarray:
    """Vector of u(x) >= 0 over a dataset, dispatching on the model variant."""
    if isinstance(model, ResidualOracle):
        return model.residuals(data)
    if isinstance(model, ConstantModel):
        return model.predict(data.covariates)
    if isinstance(model, BoostedTreeModel):
        X = data.covariates
        if model.feature_cols is not None:
            X = X[:, list(model.feature_cols)]
        return model.predict(X)
    raise TypeError(f"unknown uncertainty model type {type(model).__name__}")


@dataclass(frozen=True)
class UncertaintyConfig:
    """How calibration builds the per-subset surrogate u_I.

    ``feature_cols`` selects covariate columns for the boosted variant; the
    surrogate need not see the same features the predictors use.
    """

    kind: str = "boosted"  # "boosted" | "constant" | "oracle"
    grid: CvGrid = field(default_factory=CvGrid)
    feature_cols: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("boosted", "constant", "oracle"):
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")


def fit_surrogate(cfg: UncertaintyConfig, data: Dataset, subset: SubsetKey,
                  weights: np.ndarray, abs_residuals: np.ndarray):
    """Fit one subset's surrogate on calibration residual magnitudes."""
    if cfg.kind == "oracle":
        return ResidualOracle(weights=np.asarray(weights, dtype=float), subset=subset)
    if cfg.kind == "constant":
        return ConstantModel(float(np.mean(abs_residuals)))
    X = data.covariates
    if cfg.feature_cols is not None:
        X = X[:, list(cfg.feature_cols)]
    return fit_uncertainty(X, abs_residuals, cfg.grid, cfg.seed,
                           feature_cols=cfg.feature_cols)
