"""Deployment of a calibrated policy over an unlabeled stream.

Per instance: evaluate every candidate subset's uncertainty, clip the
square-root sampling rule, route to the cost-minimizing subset, draw the
labeling indicator from a counter-based per-instance stream, and fetch the
gold label only when that indicator is 1.  The increments

    delta_i = w' f(x_i) + (y_i - w' f(x_i)) xi_i / pi_i

average to the point estimate; the plug-in variance divides by n (not n-1),
and the interval uses the standard-normal quantile.

Labels are never read for unsampled instances: the label source is invoked
exactly on {i : xi_i = 1}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .core import (CalibrationResult, CostModel, Dataset, IntervalEstimate,
                   LabelSource, LabelSourceError, SamplingDecision, SubsetFamily,
                   SubsetKey)
from .optimizer import (BisectionConfig, FixedPointConfig, _route_matrix,
                        _tiebreak_order, _uncertainty_matrix, calibrate, clip_pi,
                        pi_star)
from .rng import stream
from .uncertainty import UncertaintyConfig


@dataclass(frozen=True, eq=False)
class DeploymentOutcome:
    """Everything a deployment run produces, including per-instance detail."""

    estimate: IntervalEstimate
    decisions: tuple[SamplingDecision, ...] | None
    labels_collected: int
    spend_breakdown: tuple[float, float]  # (query spend, label spend), realized totals
    increments: np.ndarray
    expected_spend_per_instance: float  # (sum_i c_I_i + c_label pi_i) / n


def point_estimate(increments: np.ndarray) -> float:
    """Arithmetic mean of the per-instance increments."""
    increments = np.asarray(increments, dtype=float)
    if increments.size == 0:
        raise ValueError("cannot estimate from zero increments")
    return float(increments.mean())


def variance_estimate(increments: np.ndarray, theta_hat: float) -> float:
    """Plug-in variance (1/n) sum (delta_i - theta_hat)^2 -- divisor n, not n-1."""
    increments = np.asarray(increments, dtype=float)
    n = increments.size
    if n == 1:
        warnings.warn("variance from a single increment is 0; the interval "
                      "degenerates", RuntimeWarning)
        return 0.0
    return float(np.mean((increments - theta_hat) ** 2))


def confidence_interval(theta_hat: float, sigma_sq_hat: float, n: int,
                        alpha: float, realized_spend: float = 0.0) -> IntervalEstimate:
    """Two-sided normal interval theta_hat +- z_{1-alpha/2} sigma_hat / sqrt(n)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if sigma_sq_hat < 0:
        raise ValueError("variance must be nonnegative")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * np.sqrt(sigma_sq_hat) / np.sqrt(n)
    return IntervalEstimate(theta_hat=float(theta_hat), sigma_sq_hat=float(sigma_sq_hat),
                            alpha=float(alpha), lower=float(theta_hat - half),
                            upper=float(theta_hat + half), n=int(n),
                            realized_spend=float(realized_spend))


def aipw_increments(combined: np.ndarray, labels: np.ndarray, pi: np.ndarray,
                    xi: np.ndarray) -> np.ndarray:
    """Increments w'f + (y - w'f) xi / pi; labels are only read where xi is 1."""
    combined = np.asarray(combined, dtype=float)
    pi = np.asarray(pi, dtype=float)
    xi = np.asarray(xi, dtype=bool)
    out = combined.copy()
    if xi.any():
        y = np.asarray(labels, dtype=float)
        out[xi] += (y[xi] - combined[xi]) / pi[xi]
    return out


def deploy(stream_data: Dataset, calib: CalibrationResult, alpha: float, seed: int,
           label_source: LabelSource,
           collect_decisions: bool = True) -> DeploymentOutcome:
    """Run the calibrated policy over a stream and build the interval estimate.

    Deterministic given (calib, stream, seed): the labeling lottery uses one
    uniform draw per instance position from a named counter-based stream, so
    the routing decisions cannot perturb the label draws.  If the stream size
    differs from the calibrated deployment size, the actual size is used in
    the sampling rule (with a warning).
    """
    n = stream_data.n
    if n == 0:
        raise ValueError("deployment stream is empty")
    if calib.deployment_n != n:
        warnings.warn(f"calibration assumed n={calib.deployment_n} but the stream "
                      f"has n={n}; using the actual size in the sampling rule",
                      RuntimeWarning)

    family = calib.family
    costs = calib.costs
    subset_costs = costs.subset_costs(family)
    U = _uncertainty_matrix(calib.uncertainty_models, stream_data, family)

    if calib.routing == "uniform":
        chosen = stream(seed, "route-uniform").integers(0, len(family), size=n)
        pi_all = clip_pi(pi_star(U * U, n, calib.multiplier, costs.label_cost),
                         calib.pi_floor)
        pi = pi_all[np.arange(n), chosen]
    else:
        chosen, pi = _route_matrix(U, subset_costs, calib.multiplier, n,
                                   costs.label_cost, calib.pi_floor,
                                   _tiebreak_order(subset_costs))

    xi = stream(seed, "xi").random(n) < pi

    # predictions are queried (and charged) only for the routed subset
    combined = np.empty(n)
    for idx, key in enumerate(family):
        rows = chosen == idx
        if rows.any():
            combined[rows] = stream_data.predictor_matrix(key)[rows] @ calib.weights[key]

    labels = np.full(n, np.nan)
    n_labeled = 0
    for i in np.flatnonzero(xi):
        try:
            labels[i] = float(label_source(int(i)))
        except Exception as exc:  # no silent imputation: abort with progress info
            raise LabelSourceError(index=int(i), labels_collected=n_labeled,
                                   cause=exc) from exc
        n_labeled += 1

    increments = aipw_increments(combined, labels, pi, xi)
    theta = point_estimate(increments)
    sigma_sq = variance_estimate(increments, theta)

    query_spend = float(subset_costs[chosen].sum())
    label_spend = float(costs.label_cost * n_labeled)
    expected_spend = float(np.mean(subset_costs[chosen] + costs.label_cost * pi))
    estimate = confidence_interval(theta, sigma_sq, n, alpha,
                                   realized_spend=query_spend + label_spend)

    decisions = None
    if collect_decisions:
        decisions = tuple(
            SamplingDecision(subset=family.subsets[chosen[i]], pi_hat=float(pi[i]),
                             labeled=bool(xi[i]), combined_prediction=float(combined[i]))
            for i in range(n))

    return DeploymentOutcome(estimate=estimate, decisions=decisions,
                             labels_collected=n_labeled,
                             spend_breakdown=(query_spend, label_spend),
                             increments=increments,
                             expected_spend_per_instance=expected_spend)


def asi_config(predictor_id: str, burn_in: Dataset, costs: CostModel, n: int,
               pi_floor: float = 0.01,
               fp_cfg: FixedPointConfig | None = None,
               bis_cfg: BisectionConfig | None = None,
               uncertainty_cfg: UncertaintyConfig | None = None,
               unit_lambda: bool = False) -> CalibrationResult:
    """Single-predictor baseline: the calibration loop on a singleton family.

    By default the baseline inherits the weighted-least-squares combination
    weight (the strengthened form); ``unit_lambda=True`` pins the weight at 1
    to reproduce the plain single-predictor estimator.
    """
    if predictor_id not in burn_in.predictions:
        raise KeyError(f"unknown predictor {predictor_id!r}")
    family = SubsetFamily.of([predictor_id])
    override = {family.subsets[0]: np.array([1.0])} if unit_lambda else None
    return calibrate(burn_in, family, costs, n, pi_floor=pi_floor, fp_cfg=fp_cfg,
                     bis_cfg=bis_cfg, uncertainty_cfg=uncertainty_cfg,
                     lambda_override=override)
