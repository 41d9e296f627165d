"""Sampling, weighting, and budget machinery.

The coupled optimality conditions implemented here:

* square-root sampling rule  pi*(x) = sqrt(r_I(x) / (n mu c_label)), clipped
  into [pi_floor, 1] everywhere downstream;
* weighted least squares for the combination weights with w_I = 1/pi_I - 1,
  which is exactly 0 on instances that are always labeled;
* the per-instance routed cost  r_I/n (1/pi_I - 1) + mu c_I + mu c_label pi_I,
  minimized over the candidate family with deterministic tie-breaking;
* the budget-matching multiplier: expected per-instance spend is monotonically
  non-increasing in mu, so the binding multiplier is found by bisection
  (re-routing at every candidate mu), with a closed form available in the
  unclipped single-subset case;
* the outer fixed-point calibration loop alternating multiplier, weights, and
  surrogate refits until both stabilize.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (CalibrationResult, CostModel, Dataset, InfeasibleBudgetError,
                   SingularSystemError, SubsetFamily, SubsetKey)
from .uncertainty import UncertaintyConfig, evaluate_uncertainty, fit_surrogate

_COND_LIMIT = 1e14


@dataclass(frozen=True)
class BisectionConfig:
    """Bracket and tolerance for the multiplier solve.

    The initial bracket is ``[mu_lo, mu_hi] * (c_label / n)`` so it tracks the
    natural scale of the multiplier; it auto-expands geometrically (x10, up to
    60 steps per side) when it fails to straddle the budget.
    """

    mu_lo: float = 1e-12
    mu_hi: float = 1e12
    rel_tol: float = 1e-9
    max_iters: int = 200

    def __post_init__(self):
        if not 0 < self.mu_lo < self.mu_hi:
            raise ValueError("need 0 < mu_lo < mu_hi")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class FixedPointConfig:
    """Outer-loop iteration cap, convergence tolerances, and Gram ridge."""

    max_outer_iters: int = 25
    mu_rel_tol: float = 1e-4
    lambda_rel_tol: float = 1e-4
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.mu_rel_tol <= 0 or self.lambda_rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


# ---------------------------------------------------------------------------
# pointwise rules


def pi_star(r, n: int, mu: float, c_label: float):
    """Unconstrained optimal sampling probability sqrt(r / (n mu c_label))."""
    r = np.asarray(r, dtype=float)
    if not (np.all(np.isfinite(r)) and np.isfinite(mu) and np.isfinite(c_label)):
        raise ValueError("pi_star requires finite inputs")
    if np.any(r < 0):
        raise ValueError("residual variance must be nonnegative")
    if n < 1 or mu <= 0 or c_label <= 0:
        raise ValueError("need n >= 1, mu > 0, c_label > 0")
    out = np.sqrt(r / (n * mu * c_label))
    return float(out) if out.ndim == 0 else out


def clip_pi(pi_raw, pi_floor: float):
    """Clamp into [pi_floor, 1]; idempotent."""
    if not 0 < pi_floor <= 1:
        raise ValueError("pi_floor must lie in (0, 1]")
    pi_raw = np.asarray(pi_raw, dtype=float)
    if np.any(pi_raw < 0):
        raise ValueError("raw sampling probabilities must be nonnegative")
    out = np.minimum(1.0, np.maximum(pi_floor, pi_raw))
    return float(out) if out.ndim == 0 else out


def instance_cost(r, pi_hat, mu: float, c_subset: float, c_label: float, n: int):
    """Per-instance routed cost; equals mu (c_subset + c_label) exactly at pi = 1."""
    r = np.asarray(r, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    if np.any(pi_hat <= 0) or np.any(pi_hat > 1):
        raise ValueError("pi_hat must lie in (0, 1]")
    out = (r / n) * (1.0 / pi_hat - 1.0) + mu * c_subset + mu * c_label * pi_hat
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# weighted least squares


def solve_lambda_wls(features: np.ndarray, targets: np.ndarray,
                     weights: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Minimize sum_i w_i (y_i - lambda' f_i)^2.

    With ridge = 0 on a nonsingular weighted Gram matrix the solution
    satisfies the moment condition sum_i w_i (y_i - lambda' f_i) f_i = 0 to
    numerical precision.  A singular Gram with ridge = 0 raises
    SingularSystemError carrying the condition estimate.
    """
    F = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float)
    if F.shape[0] != y.size or w.size != y.size:
        raise ValueError("features, targets, weights disagree on sample count")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    wf = F * w[:, None]
    gram = wf.T @ F
    rhs = wf.T @ y
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    cond = float(np.linalg.cond(gram)) if np.all(np.isfinite(gram)) else np.inf
    if ridge == 0.0 and (not np.isfinite(cond) or cond > _COND_LIMIT):
        raise SingularSystemError("weighted Gram matrix is singular", cond=cond)
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"linear solve failed: {exc}", cond=cond) from exc


def _ridge_jitter(features: np.ndarray, weights: np.ndarray) -> float:
    gram = (features * weights[:, None]).T @ features
    q = gram.shape[0]
    return 1e-8 * float(np.trace(gram)) / q if q else 0.0


# ---------------------------------------------------------------------------
# routing and spend over an uncertainty matrix


def _tiebreak_order(subset_costs: np.ndarray) -> np.ndarray:
    """Column evaluation order: lowest subset cost first, then family order."""
    return np.lexsort((np.arange(subset_costs.size), subset_costs))


def _route_matrix(U: np.ndarray, subset_costs: np.ndarray, mu: float, n: int,
                  c_label: float, pi_floor: float,
                  order: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized routing: row-wise argmin of the per-instance cost.

    Returns (chosen column index into the family, clipped pi for the chosen
    subset).  Ties go to the lowest-cost subset, then canonical family order.
    """
    R = U * U
    pi = clip_pi(pi_star(R, n, mu, c_label), pi_floor)
    cost = (R / n) * (1.0 / pi - 1.0) + mu * subset_costs[None, :] + mu * c_label * pi
    # argmin over columns pre-sorted by the tie-break priority
    picked = np.argmin(cost[:, order], axis=1)
    chosen = order[picked]
    rows = np.arange(U.shape[0])
    return chosen, pi[rows, chosen]


def route(x_uncertainties: Mapping[SubsetKey, float], costs: CostModel, mu: float,
          n: int, pi_floor: float) -> tuple[SubsetKey, float]:
    """Route one instance given its per-subset uncertainties u_I(x)."""
    if not x_uncertainties:
        raise ValueError("cannot route over an empty family")
    keys = list(x_uncertainties.keys())
    U = np.array([[x_uncertainties[k] for k in keys]], dtype=float)
    c = np.array([costs.subset_cost(k) for k in keys], dtype=float)
    chosen, pi = _route_matrix(U, c, mu, n, costs.label_cost, pi_floor,
                               _tiebreak_order(c))
    return keys[int(chosen[0])], float(pi[0])


def _spend_from_U(U: np.ndarray, subset_costs: np.ndarray, mu: float, n: int,
                  c_label: float, pi_floor: float, routing: str,
                  order: np.ndarray) -> float:
    if routing == "uniform":
        pi = clip_pi(pi_star(U * U, n, mu, c_label), pi_floor)
        return float(np.mean(subset_costs[None, :] + c_label * pi))
    chosen, pi = _route_matrix(U, subset_costs, mu, n, c_label, pi_floor, order)
    return float(np.mean(subset_costs[chosen] + c_label * pi))


def _spend_fast(U: np.ndarray, R: np.ndarray, subset_costs: np.ndarray, mu: float,
                n: int, c_label: float, pi_floor: float, routing: str,
                order: np.ndarray) -> float:
    """Allocation-lean spend evaluation for the bisection inner loop."""
    pi = np.sqrt(R * (1.0 / (n * mu * c_label)))
    np.clip(pi, pi_floor, 1.0, out=pi)
    if routing == "uniform":
        return float(np.mean(subset_costs[None, :] + c_label * pi))
    cost = (R / n) * (1.0 / pi - 1.0)
    cost += mu * (subset_costs[None, :] + c_label * pi)
    picked = np.argmin(cost[:, order], axis=1)
    chosen = order[picked]
    pi_route = pi[np.arange(U.shape[0]), chosen]
    return float(np.mean(subset_costs[chosen] + c_label * pi_route))


def _uncertainty_matrix(models: Mapping[SubsetKey, object], data: Dataset,
                        family: SubsetFamily) -> np.ndarray:
    return np.column_stack([evaluate_uncertainty(models[key], data, key)
                            for key in family])


def expected_spend(burn_in: Dataset, family: SubsetFamily,
                   uncertainty_models: Mapping[SubsetKey, object], costs: CostModel,
                   mu: float, n: int, pi_floor: float,
                   routing: str = "optimal") -> float:
    """Burn-in average of c_{I*(x)} + c_label * pi_{I*(x)}(x) at this mu."""
    if burn_in.n == 0:
        raise ValueError("burn-in dataset is empty")
    if mu <= 0:
        raise ValueError("mu must be positive")
    U = _uncertainty_matrix(uncertainty_models, burn_in, family)
    c = costs.subset_costs(family)
    return _spend_from_U(U, c, mu, n, costs.label_cost, pi_floor, routing,
                         _tiebreak_order(c))


# ---------------------------------------------------------------------------
# multiplier solve


@dataclass(frozen=True)
class MuSolution:
    """Result of the multiplier solve; ``binding`` is False when the budget is slack."""

    mu: float
    binding: bool
    spend: float
    residual: float  # |spend - b| / b at mu
    iterations: int


def mu_closed_form(mean_sqrt_r: float, b: float, mean_c: float, c_label: float,
                   n: int) -> float:
    """Unclipped single-subset multiplier (c_label/n) (E sqrt r / (b - E c))^2."""
    if mean_sqrt_r < 0:
        raise ValueError("mean_sqrt_r must be nonnegative")
    if b <= mean_c:
        raise InfeasibleBudgetError(
            f"per-instance budget {b} does not exceed the mean query cost {mean_c}")
    return (c_label / n) * (mean_sqrt_r / (b - mean_c)) ** 2


def _solve_mu_from_U(U: np.ndarray, subset_costs: np.ndarray, costs: CostModel,
                     n: int, pi_floor: float, cfg: BisectionConfig,
                     routing: str) -> MuSolution:
    b = costs.per_instance_budget
    c_label = costs.label_cost
    order = _tiebreak_order(subset_costs)
    if routing == "uniform":
        floor_spend = float(np.mean(subset_costs)) + pi_floor * c_label
    else:
        floor_spend = float(np.min(subset_costs)) + pi_floor * c_label
    if b <= floor_spend:
        raise InfeasibleBudgetError(
            f"budget b={b} cannot cover the floor spend {floor_spend:.6g} "
            f"(cheapest queries + pi_floor * c_label)")

    R = U * U

    def spend(mu: float) -> float:
        return _spend_fast(U, R, subset_costs, mu, n, c_label, pi_floor, routing, order)

    scale = c_label / n
    lo, hi = cfg.mu_lo * scale, cfg.mu_hi * scale
    evals = 0

    s_lo = spend(lo)
    evals += 1
    expansions = 0
    while s_lo < b and expansions < 60:
        lo /= 10.0
        s_lo = spend(lo)
        evals += 1
        expansions += 1
    if s_lo < b:
        # even a vanishing multiplier cannot spend the budget: it never binds
        return MuSolution(mu=lo, binding=False, spend=s_lo,
                          residual=abs(s_lo - b) / b, iterations=evals)

    s_hi = spend(hi)
    evals += 1
    expansions = 0
    while s_hi >= b and expansions < 60:
        hi *= 10.0
        s_hi = spend(hi)
        evals += 1
        expansions += 1
    if s_hi >= b:
        raise InfeasibleBudgetError("no multiplier bracket found: spend never "
                                    "falls below the budget")

    # invariant: spend(lo) >= b > spend(hi); geometric bisection in mu
    for _ in range(cfg.max_iters):
        if hi / lo - 1.0 <= 1e-13:
            break
        mid = float(np.sqrt(lo * hi))
        if spend(mid) >= b:
            lo = mid
        else:
            hi = mid
        evals += 1

    # expected spend can jump where the routing switches, so the identity may
    # be unattainable exactly; the achieved residual is recorded either way
    s_final = spend(hi)
    residual = abs(s_final - b) / b
    return MuSolution(mu=hi, binding=True, spend=s_final, residual=residual,
                      iterations=evals)


def solve_mu(burn_in: Dataset, family: SubsetFamily,
             uncertainty_models: Mapping[SubsetKey, object], costs: CostModel,
             n: int, pi_floor: float, cfg: BisectionConfig | None = None,
             routing: str = "optimal") -> MuSolution:
    """Find the multiplier whose expected spend matches the per-instance budget.

    Spend is non-increasing in mu, so bisection brackets the unique crossing;
    the routing is re-evaluated at every candidate mu.  When the budget never
    binds (spend < b even as mu -> 0) the bracket's lower end is returned with
    ``binding=False``; a budget below the floor spend raises
    InfeasibleBudgetError.
    """
    if burn_in.n == 0:
        raise ValueError("burn-in dataset is empty")
    cfg = cfg or BisectionConfig()
    U = _uncertainty_matrix(uncertainty_models, burn_in, family)
    return _solve_mu_from_U(U, costs.subset_costs(family), costs, n, pi_floor,
                            cfg, routing)


# ---------------------------------------------------------------------------
# calibration fixed point


def _ols_cov_init(F: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Covariance-based OLS initialization Cov(f, f)^-1 Cov(f, Y)."""
    q = F.shape[1]
    stacked = np.column_stack([F, y])
    cov = np.cov(stacked, rowvar=False)
    gram, rhs = cov[:q, :q], cov[:q, q]
    gram = np.atleast_2d(gram)
    if ridge > 0:
        gram = gram + ridge * np.eye(q)
    cond = float(np.linalg.cond(gram)) if np.all(np.isfinite(gram)) else np.inf
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        jitter = 1e-8 * float(np.trace(gram)) / q
        warnings.warn(f"singular covariance in OLS init; adding ridge {jitter:.3e}",
                      RuntimeWarning)
        gram = gram + jitter * np.eye(q)
    return np.linalg.solve(gram, np.atleast_1d(rhs))


def _wls_with_retry(F: np.ndarray, y: np.ndarray, w: np.ndarray,
                    ridge: float) -> np.ndarray:
    try:
        return solve_lambda_wls(F, y, w, ridge)
    except SingularSystemError:
        jitter = _ridge_jitter(F, w)
        warnings.warn(f"singular weighted Gram; retrying with ridge {jitter:.3e}",
                      RuntimeWarning)
        return solve_lambda_wls(F, y, w, max(ridge, jitter))


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(old)), 1e-12)
    return float(np.linalg.norm(np.asarray(new) - np.asarray(old))) / denom


def calibrate(burn_in: Dataset, family: SubsetFamily, costs: CostModel, n: int,
              pi_floor: float = 0.01,
              fp_cfg: FixedPointConfig | None = None,
              bis_cfg: BisectionConfig | None = None,
              uncertainty_cfg: UncertaintyConfig | None = None,
              lambda_override: Mapping[SubsetKey, Sequence[float]] | None = None,
              routing: str = "optimal") -> CalibrationResult:
    """Fixed-point calibration on a fully labeled burn-in sample.

    Per subset: covariance-OLS weight initialization and a surrogate fit on
    |y - lambda' f|; then alternate (multiplier solve, weighted least squares
    with w = 1/pi - 1, surrogate refit) until the relative changes of the
    multiplier and of every weight vector fall below tolerance or the
    iteration cap is reached (the last iterate is returned with
    ``converged=False``, not an error).  A final multiplier solve against the
    returned weights and surrogates records the budget residual.

    ``lambda_override`` pins selected weight vectors (e.g. unit weights for
    the plain single-predictor baseline); ``routing="uniform"`` calibrates
    the random-routing ablation.  Note the surrogates are refit on the same
    burn-in used for the weights; no cross-fitting is applied.
    """
    fp_cfg = fp_cfg or FixedPointConfig()
    bis_cfg = bis_cfg or BisectionConfig()
    uncertainty_cfg = uncertainty_cfg or UncertaintyConfig()
    lambda_override = dict(lambda_override or {})

    if not burn_in.labeled_throughout():
        raise ValueError("calibration requires a fully labeled burn-in dataset")
    if burn_in.n < 2:
        raise ValueError("burn-in needs at least 2 rows")
    if not costs.slater_feasible(family, pi_floor):
        raise InfeasibleBudgetError(
            "budget fails Slater feasibility: even the cheapest subset with "
            "floor-rate labeling exceeds b")

    y = burn_in.labels
    feats = {key: burn_in.predictor_matrix(key) for key in family}
    subset_costs = costs.subset_costs(family)

    weights: dict[SubsetKey, np.ndarray] = {}
    models: dict[SubsetKey, object] = {}
    for key in family:
        if key in lambda_override:
            lam = np.asarray(lambda_override[key], dtype=float)
            if lam.shape != (len(key),):
                raise ValueError(f"override for {key} has wrong length")
        else:
            lam = _ols_cov_init(feats[key], y, fp_cfg.ridge)
        weights[key] = lam
        abs_resid = np.abs(y - feats[key] @ lam)
        models[key] = fit_surrogate(uncertainty_cfg, burn_in, key, lam, abs_resid)

    mu_prev: float | None = None
    converged = False
    iterations = 0
    for t in range(1, fp_cfg.max_outer_iters + 1):
        iterations = t
        U = _uncertainty_matrix(models, burn_in, family)
        sol = _solve_mu_from_U(U, subset_costs, costs, n, pi_floor, bis_cfg, routing)
        mu = sol.mu

        lambda_change = 0.0
        for idx, key in enumerate(family):
            if key in lambda_override:
                continue
            pi = clip_pi(pi_star(U[:, idx] ** 2, n, mu, costs.label_cost), pi_floor)
            w = 1.0 / pi - 1.0  # exactly 0 where pi == 1
            if w.sum() <= 0.0:
                continue  # every instance always labeled: prediction term drops out
            lam = _wls_with_retry(feats[key], y, w, fp_cfg.ridge)
            lambda_change = max(lambda_change, _rel_change(lam, weights[key]))
            weights[key] = lam

        for key in family:
            abs_resid = np.abs(y - feats[key] @ weights[key])
            models[key] = fit_surrogate(uncertainty_cfg, burn_in, key,
                                        weights[key], abs_resid)

        if mu_prev is not None:
            mu_change = abs(mu - mu_prev) / max(mu_prev, 1e-300)
            if mu_change < fp_cfg.mu_rel_tol and lambda_change < fp_cfg.lambda_rel_tol:
                converged = True
                mu_prev = mu
                break
        mu_prev = mu

    # re-solve against the final weights/surrogates so the recorded multiplier
    # meets the budget identity for the state actually returned
    U = _uncertainty_matrix(models, burn_in, family)
    final = _solve_mu_from_U(U, subset_costs, costs, n, pi_floor, bis_cfg, routing)
    if not converged and fp_cfg.max_outer_iters > 1:
        warnings.warn(f"calibration did not converge within "
                      f"{fp_cfg.max_outer_iters} outer iterations", RuntimeWarning)

    return CalibrationResult(
        weights=weights,
        uncertainty_models=models,
        multiplier=final.mu,
        family=family,
        costs=costs,
        deployment_n=int(n),
        pi_floor=float(pi_floor),
        routing=routing,
        converged=converged,
        n_iters=iterations,
        budget_binding=final.binding,
        budget_residual=final.residual,
    )
