"""Shared domain types for routed, budget-constrained inference.

Everything here is immutable after construction and safe to share across
parallel trial workers.  Predictor ids are opaque strings; predictor
subsets are canonicalized to sorted tuples so they can serve as dict keys
without duplicate-subset ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

SubsetKey = tuple[str, ...]

LabelSource = Callable[[int], float]


class InfeasibleBudgetError(ValueError):
    """The per-instance budget cannot cover the cheapest query + floor-rate labeling."""


class SingularSystemError(RuntimeError):
    """A (weighted) Gram matrix was numerically singular.

    Carries the condition number estimate so callers can decide whether a
    ridge retry is appropriate.
    """

    def __init__(self, message: str, cond: float):
        super().__init__(f"{message} (condition number ~ {cond:.3e})")
        self.cond = cond


class LabelSourceError(RuntimeError):
    """Label collection failed mid-deployment; carries partial progress."""

    def __init__(self, index: int, labels_collected: int, cause: Exception):
        super().__init__(
            f"label source failed on instance {index} after collecting "
            f"{labels_collected} labels: {cause!r}"
        )
        self.index = index
        self.labels_collected = labels_collected
        self.cause = cause


def subset_key(members: Iterable[str]) -> SubsetKey:
    """Canonical (sorted, duplicate-free) key for a predictor subset."""
    key = tuple(sorted(members))
    if not key:
        raise ValueError("predictor subsets must be non-empty")
    if len(set(key)) != len(key):
        raise ValueError(f"duplicate predictor ids in subset: {key}")
    return key


def subset_label(key: SubsetKey) -> str:
    return "+".join(key)


@dataclass(frozen=True, eq=False)
class Dataset:
    """A batch of instances: covariates, per-predictor predictions, optional labels.

    ``labels`` may be None for a purely unlabeled stream; individual rows may
    be NaN when only some labels exist.  All columns must share length n.
    """

    covariates: np.ndarray
    predictions: Mapping[str, np.ndarray]
    labels: np.ndarray | None = None

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        object.__setattr__(self, "covariates", cov)
        preds = {k: np.asarray(v, dtype=float) for k, v in self.predictions.items()}
        object.__setattr__(self, "predictions", preds)
        n = cov.shape[0]
        for pid, col in preds.items():
            if col.shape != (n,):
                raise ValueError(f"prediction column {pid!r} has shape {col.shape}, expected ({n},)")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=float)
            if lab.shape != (n,):
                raise ValueError(f"labels have shape {lab.shape}, expected ({n},)")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def predictor_matrix(self, key: SubsetKey) -> np.ndarray:
        """Stack the subset's prediction columns, n x |I|, in canonical order."""
        missing = [pid for pid in key if pid not in self.predictions]
        if missing:
            raise KeyError(f"dataset lacks prediction columns {missing}")
        return np.column_stack([self.predictions[pid] for pid in key])

    def labeled_throughout(self) -> bool:
        return self.labels is not None and bool(np.all(np.isfinite(self.labels)))


@dataclass(frozen=True)
class SubsetFamily:
    """Ordered candidate family of predictor subsets."""

    subsets: tuple[SubsetKey, ...]

    def __post_init__(self):
        keys = tuple(subset_key(s) for s in self.subsets)
        if not keys:
            raise ValueError("the candidate family must be non-empty")
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate subsets in family")
        object.__setattr__(self, "subsets", keys)

    @classmethod
    def of(cls, *subsets: Iterable[str]) -> "SubsetFamily":
        return cls(tuple(subset_key(s) for s in subsets))

    def __len__(self) -> int:
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)

    def predictor_ids(self) -> set[str]:
        return {pid for key in self.subsets for pid in key}


@dataclass(frozen=True)
class CostModel:
    """Per-predictor query costs, the label cost, and the per-instance budget b."""

    predictor_costs: Mapping[str, float]
    label_cost: float
    per_instance_budget: float

    def __post_init__(self):
        costs = {k: float(v) for k, v in self.predictor_costs.items()}
        if any(v < 0 for v in costs.values()):
            raise ValueError("predictor costs must be nonnegative")
        if not self.label_cost > 0:
            raise ValueError("label cost must be positive")
        if not self.per_instance_budget > 0:
            raise ValueError("per-instance budget must be positive")
        object.__setattr__(self, "predictor_costs", costs)
        object.__setattr__(self, "label_cost", float(self.label_cost))
        object.__setattr__(self, "per_instance_budget", float(self.per_instance_budget))

    def subset_cost(self, key: SubsetKey) -> float:
        # always derived from per-predictor costs, never stored
        return float(sum(self.predictor_costs[pid] for pid in key))

    def subset_costs(self, family: SubsetFamily) -> np.ndarray:
        return np.array([self.subset_cost(key) for key in family], dtype=float)

    def slater_feasible(self, family: SubsetFamily, pi_floor: float) -> bool:
        """True when some subset can be queried and floor-labeled within budget."""
        floor_spend = min(self.subset_cost(k) + pi_floor * self.label_cost for k in family)
        return floor_spend < self.per_instance_budget

    def with_budget(self, per_instance_budget: float) -> "CostModel":
        return CostModel(self.predictor_costs, self.label_cost, per_instance_budget)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Fitted weights, uncertainty surrogates, and multiplier from calibration."""

    weights: Mapping[SubsetKey, np.ndarray]
    uncertainty_models: Mapping[SubsetKey, object]
    multiplier: float
    family: SubsetFamily
    costs: CostModel
    deployment_n: int
    pi_floor: float
    routing: str = "optimal"  # "optimal" or "uniform" (ablation)
    converged: bool = True
    n_iters: int = 0
    budget_binding: bool = True
    budget_residual: float = 0.0  # |expected spend - b| / b at the returned multiplier

    def __post_init__(self):
        weights = {k: np.asarray(v, dtype=float) for k, v in self.weights.items()}
        object.__setattr__(self, "weights", weights)
        for key in self.family:
            if key not in weights:
                raise ValueError(f"missing weight vector for subset {key}")
            if key not in self.uncertainty_models:
                raise ValueError(f"missing uncertainty model for subset {key}")
            if weights[key].shape != (len(key),):
                raise ValueError(f"weight vector for {key} has wrong length")
        if self.routing not in ("optimal", "uniform"):
            raise ValueError(f"unknown routing mode {self.routing!r}")


@dataclass(frozen=True)
class SamplingDecision:
    """Per-instance outcome of routing and the labeling lottery."""

    subset: SubsetKey
    pi_hat: float
    labeled: bool
    combined_prediction: float


@dataclass(frozen=True)
class IntervalEstimate:
    """Point estimate with plug-in variance and a two-sided normal interval."""

    theta_hat: float
    sigma_sq_hat: float
    alpha: float
    lower: float
    upper: float
    n: int
    realized_spend: float = 0.0


@dataclass(frozen=True)
class TwoPopParams:
    """Parameters of the closed-form two-population advantage model.

    A fraction ``p`` of instances is easy (both predictors reach residual
    variance ``r_e``); on the hard remainder the cheap predictor has residual
    variance ``r_h`` and the expensive one ``r_h * (1 - delta)``.  Derived
    quantities (average root residuals, routing cost) are always recomputed
    by the analytic module, never cached here.
    """

    p: float
    r_e: float
    r_h: float
    delta: float
    c1: float
    c2: float
    c_label: float
    b: float
    n: int
    var_y: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.r_e < 0 or self.r_h < 0:
            raise ValueError("residual variances must be nonnegative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("predictor costs must be nonnegative")
        if not self.c_label > 0 or not self.b > 0:
            raise ValueError("label cost and budget must be positive")
        if self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.var_y < 0:
            raise ValueError("var_y must be nonnegative")
