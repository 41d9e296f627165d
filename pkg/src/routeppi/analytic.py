"""Closed-form two-population advantage model.

A fraction p of instances is easy (residual variance r_e for both
predictors); on the hard remainder the cheap predictor sits at r_h and the
expensive one at r_h (1 - delta).  Routing sends easy instances to the cheap
predictor and hard ones to the expensive predictor, so the routed method
keeps the expensive predictor's residual profile while paying only the
blended query cost.  The ratios R1 and R2 are the tight-budget
approximations of the variance advantage over a single fixed predictor.
"""

from __future__ import annotations

import numpy as np

from .core import InfeasibleBudgetError, TwoPopParams


def _residual_variances(params: TwoPopParams, j: int) -> tuple[float, float]:
    if j not in (1, 2):
        raise ValueError("predictor index must be 1 (cheap) or 2 (expensive)")
    r_hard = params.r_h if j == 1 else params.r_h * (1.0 - params.delta)
    return params.r_e, r_hard


def avg_root_residual(params: TwoPopParams, j: int) -> float:
    """S_j = p sqrt(r_{j,e}) + (1-p) sqrt(r_{j,h})."""
    r_e, r_h = _residual_variances(params, j)
    return params.p * np.sqrt(r_e) + (1.0 - params.p) * np.sqrt(r_h)


def mean_residual(params: TwoPopParams, j: int) -> float:
    """T_j = p r_{j,e} + (1-p) r_{j,h}."""
    r_e, r_h = _residual_variances(params, j)
    return params.p * r_e + (1.0 - params.p) * r_h


def routing_cost(params: TwoPopParams) -> float:
    """C_route = p c1 + (1-p) c2: easy -> cheap, hard -> expensive."""
    return params.p * params.c1 + (1.0 - params.p) * params.c2


def var_asi(params: TwoPopParams, j: int, include_var_y: bool = True) -> float:
    """Variance of the single-predictor baseline committed to predictor j."""
    c_j = params.c1 if j == 1 else params.c2
    if params.b <= c_j:
        raise InfeasibleBudgetError(f"budget b={params.b} does not exceed c_{j}={c_j}")
    s = avg_root_residual(params, j)
    t = mean_residual(params, j)
    bracket = s * s * params.c_label / (params.b - c_j) - t
    return (params.var_y * include_var_y + bracket) / params.n


def var_ampi(params: TwoPopParams, include_var_y: bool = True) -> float:
    """Variance of the routed method: predictor-2 residual profile at blended cost."""
    c_route = routing_cost(params)
    if params.b <= c_route:
        raise InfeasibleBudgetError(
            f"budget b={params.b} does not exceed the routing cost {c_route}")
    s2 = avg_root_residual(params, 2)
    t2 = mean_residual(params, 2)
    bracket = s2 * s2 * params.c_label / (params.b - c_route) - t2
    return (params.var_y * include_var_y + bracket) / params.n


def ratio_r2(p: float, phi: float) -> float:
    """Advantage over the expensive baseline: 1 + p phi / (1 - phi).

    phi = c2 / b is the expensive predictor's share of the budget; the gain
    is pure budget savings and depends only on (p, phi).
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    return 1.0 + p * phi / (1.0 - phi)


def ratio_r1(p: float, phi: float, delta: float) -> float:
    """Advantage over the cheap baseline: (1 - (1-p) phi) / (1 - delta).

    Exceeds 1 exactly when delta > (1-p) phi: the per-hard-instance variance
    gain must beat the budget spent on expensive queries.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1)")
    return (1.0 - (1.0 - p) * phi) / (1.0 - delta)


def width_reduction_pct(ratio: float) -> float:
    """Variance ratio R -> percent reduction in interval width, 100 (1 - 1/sqrt R)."""
    if ratio <= 0:
        raise ValueError("variance ratio must be positive")
    return 100.0 * (1.0 - 1.0 / np.sqrt(ratio))


def heatmap_rows(p_grid, phi_grid, delta_grid, p_fixed: float = 0.5) -> list[dict]:
    """Grid rows behind the two heatmaps.

    Case "expensive-baseline": R2 over (p, phi).  Case "cheap-baseline": R1
    over (delta, phi) at p = p_fixed.  Every phi must lie strictly below 1.
    """
    for phi in phi_grid:
        if not 0 < phi < 1:
            raise ValueError(f"phi grid values must lie in (0, 1); got {phi}")
    rows = []
    for p in p_grid:
        for phi in phi_grid:
            r2 = ratio_r2(p, phi)
            rows.append({"case": "expensive-baseline", "p": p, "phi": phi,
                         "delta": "", "ratio": r2,
                         "width_reduction_pct": width_reduction_pct(r2)})
    for delta in delta_grid:
        for phi in phi_grid:
            r1 = ratio_r1(p_fixed, phi, delta)
            rows.append({"case": "cheap-baseline", "p": p_fixed, "phi": phi,
                         "delta": delta, "ratio": r1,
                         "width_reduction_pct": width_reduction_pct(r1)})
    return rows
