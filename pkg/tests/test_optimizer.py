"""KKT machinery: sampling rule, clipping, WLS, spend, multiplier, routing,
and the calibration fixed point."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routeppi.core import (CostModel, Dataset, InfeasibleBudgetError,
                           SingularSystemError, SubsetFamily)
from routeppi.optimizer import (BisectionConfig, FixedPointConfig, calibrate,
                                clip_pi, expected_spend, instance_cost,
                                mu_closed_form, pi_star, route, solve_lambda_wls,
                                solve_mu)
from routeppi.uncertainty import ConstantModel, UncertaintyConfig


def constant_models(family, values):
    return {key: ConstantModel(v) for key, v in zip(family, values)}


def make_burn_in(n=40, seed=0, n_pred=2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = X[:, 0] + 0.3 * rng.standard_normal(n)
    preds = {f"p{i}": y + (0.2 + 0.3 * i) * rng.standard_normal(n)
             for i in range(n_pred)}
    return Dataset(covariates=X, predictions=preds, labels=y)


class TestPiStar:
    def test_hand_value(self):
        assert pi_star(1.0, 100, 0.04, 1.0) == pytest.approx(0.5)

    def test_boundary_equals_one(self):
        n, mu, c = 50, 0.3, 2.0
        assert pi_star(n * mu * c, n, mu, c) == pytest.approx(1.0)

    def test_zero_residual(self):
        assert pi_star(0.0, 10, 1.0, 1.0) == 0.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            pi_star(np.nan, 10, 1.0, 1.0)
        with pytest.raises(ValueError):
            pi_star(1.0, 10, 0.0, 1.0)
        with pytest.raises(ValueError):
            pi_star(-1.0, 10, 1.0, 1.0)


class TestClipPi:
    def test_upper_clip(self):
        assert clip_pi(2.0, 0.01) == 1.0

    def test_interior(self):
        assert clip_pi(0.5, 0.01) == 0.5

    def test_floor(self):
        assert clip_pi(0.001, 0.01) == 0.01

    @given(st.floats(min_value=0.0, max_value=1e6),
           st.floats(min_value=1e-6, max_value=1.0))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, raw, floor):
        once = clip_pi(raw, floor)
        assert clip_pi(once, floor) == once
        assert floor <= once <= 1.0


class TestWls:
    def test_perfect_single_predictor(self):
        y = np.array([1.0, 2.0, -3.0, 0.5])
        lam = solve_lambda_wls(y[:, None], y, np.array([0.3, 1.0, 2.0, 0.7]))
        assert lam[0] == pytest.approx(1.0, abs=1e-12)

    def test_two_point_normal_equations(self):
        f = np.array([[1.0], [2.0]])
        y = np.array([2.0, 4.0])
        lam = solve_lambda_wls(f, y, np.ones(2))
        assert lam[0] == pytest.approx(2.0, abs=1e-12)

    def test_matches_direct_normal_equation_solve(self):
        rng = np.random.default_rng(7)
        F = rng.standard_normal((10, 2))
        y = rng.standard_normal(10)
        w = rng.random(10) + 0.1
        lam = solve_lambda_wls(F, y, w)
        gram = (F * w[:, None]).T @ F
        rhs = (F * w[:, None]).T @ y
        oracle = np.linalg.inv(gram) @ rhs
        np.testing.assert_allclose(lam, oracle, atol=1e-10)

    def test_moment_condition(self):
        rng = np.random.default_rng(11)
        F = rng.standard_normal((60, 3))
        y = F @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(60)
        w = rng.random(60) + 0.05
        lam = solve_lambda_wls(F, y, w)
        moment = (w * (y - F @ lam)) @ F
        assert np.max(np.abs(moment)) < 1e-8

    def test_singular_without_ridge(self):
        F = np.ones((5, 2))  # duplicated column
        y = np.arange(5.0)
        with pytest.raises(SingularSystemError) as err:
            solve_lambda_wls(F, y, np.ones(5))
        assert err.value.cond > 1e14 or not np.isfinite(err.value.cond)

    def test_ridge_recovers_singular_system(self):
        F = np.ones((5, 2))
        y = np.arange(5.0)
        lam = solve_lambda_wls(F, y, np.ones(5), ridge=1e-6)
        assert np.all(np.isfinite(lam))


class TestInstanceCost:
    def test_hand_evaluated_pair(self):
        cost_a = instance_cost(1.0, 0.5, 0.04, 0.01, 1.0, 100)
        cost_b = instance_cost(0.25, 0.25, 0.04, 0.05, 1.0, 100)
        assert cost_a == pytest.approx(0.0304)
        assert cost_b == pytest.approx(0.0195)
        assert cost_b < cost_a

    def test_always_label_value(self):
        assert instance_cost(5.0, 1.0, 0.04, 0.05, 1.0, 100) == pytest.approx(0.042)

    def test_monotone_in_r_with_matched_pi(self):
        n, mu, c_label, c = 200, 0.02, 1.0, 0.03
        rs = np.linspace(0.0, 3.0 * n * mu * c_label, 400)  # spans the clip point
        pis = clip_pi(pi_star(rs, n, mu, c_label), 1e-9)
        pis = np.maximum(pis, 1e-12)
        costs = instance_cost(rs, pis, mu, c, c_label, n)
        assert np.all(np.diff(costs) >= -1e-12)

    def test_continuity_at_clip_boundary(self):
        n, mu, c_label, c = 100, 0.05, 2.0, 0.3
        r_star = n * mu * c_label
        unclipped = (2.0 * np.sqrt(mu * c_label / n) * np.sqrt(r_star)
                     - r_star / n + mu * c)
        clipped = mu * (c + c_label)
        assert unclipped == pytest.approx(clipped, abs=1e-10)


class TestExpectedSpend:
    def test_uniform_residual_single_subset(self):
        family = SubsetFamily.of(["p0"])
        burn = make_burn_in(n=20, n_pred=1)
        costs = CostModel({"p0": 0.0}, 1.0, 0.6)
        models = constant_models(family, [1.0])
        spend = expected_spend(burn, family, models, costs, mu=0.04, n=100,
                               pi_floor=1e-6)
        assert spend == pytest.approx(0.5)

    def test_large_mu_limit(self):
        family = SubsetFamily.of(["p0"], ["p1"])
        burn = make_burn_in(n=20)
        costs = CostModel({"p0": 0.05, "p1": 0.02}, 1.0, 0.5)
        models = constant_models(family, [1.0, 2.0])
        spend = expected_spend(burn, family, models, costs, mu=1e12, n=100,
                               pi_floor=0.01)
        assert spend == pytest.approx(0.02 + 0.01 * 1.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_monotone_non_increasing_in_mu(self, seed):
        rng = np.random.default_rng(seed)
        family = SubsetFamily.of(["p0"], ["p1"], ["p0", "p1"])
        burn = make_burn_in(n=30, seed=seed)
        costs = CostModel({"p0": rng.random() * 0.1, "p1": rng.random() * 0.1},
                          1.0, 0.5)
        models = constant_models(family, rng.random(3) + 0.2)
        mus = np.logspace(-6, 2, 60)
        spends = [expected_spend(burn, family, models, costs, mu=m, n=200,
                                 pi_floor=0.01) for m in mus]
        assert np.all(np.diff(spends) <= 1e-12)

    def test_empty_burn_in_rejected(self):
        family = SubsetFamily.of(["p0"])
        empty = Dataset(covariates=np.empty((0, 2)), predictions={"p0": np.empty(0)})
        costs = CostModel({"p0": 0.0}, 1.0, 0.5)
        with pytest.raises(ValueError):
            expected_spend(empty, family, constant_models(family, [1.0]), costs,
                           mu=1.0, n=10, pi_floor=0.01)


class TestSolveMu:
    def test_closed_form_boundary_fixture(self):
        # constant u = 2, c_I = 0.5, b = 1.5: spend plateaus at b left of the
        # boundary multiplier, so bisection must land on it exactly
        family = SubsetFamily.of(["p0"])
        burn = make_burn_in(n=25, n_pred=1)
        costs = CostModel({"p0": 0.5}, 1.0, 1.5)
        models = constant_models(family, [2.0])
        sol = solve_mu(burn, family, models, costs, n=100, pi_floor=1e-9)
        assert sol.binding
        assert sol.mu == pytest.approx(0.04, rel=1e-6)

    def test_matches_closed_form_on_interior_fixture(self):
        from routeppi import uncertainty as unc
        family = SubsetFamily.of(["p0"])
        n_burn = 50
        u = np.linspace(0.5, 1.5, n_burn)  # mean 1, no clipping at the solution
        burn = Dataset(covariates=u[:, None], predictions={"p0": np.zeros(n_burn)},
                       labels=np.zeros(n_burn))
        # a deep single tree reproduces u(x) exactly at the burn-in points
        model = unc.fit_uncertainty(u[:, None], u, unc.CvGrid((1,), (8,), (1.0,)), 0)
        np.testing.assert_allclose(unc.evaluate_uncertainty(model, burn, ("p0",)),
                                   u, atol=1e-9)
        costs = CostModel({"p0": 0.1}, 1.0, 0.6)
        sol = solve_mu(burn, family, {("p0",): model}, costs, n=50, pi_floor=1e-9)
        expected = mu_closed_form(float(u.mean()), 0.6, 0.1, 1.0, 50)
        assert sol.mu == pytest.approx(expected, rel=1e-6)
        assert sol.residual <= 1e-9

    def test_infeasible_budget(self):
        family = SubsetFamily.of(["p0"])
        burn = make_burn_in(n=10, n_pred=1)
        costs = CostModel({"p0": 0.5}, 1.0, 0.4)  # b < c_I already
        with pytest.raises(InfeasibleBudgetError):
            solve_mu(burn, family, constant_models(family, [1.0]), costs, n=10,
                     pi_floor=0.01)

    def test_non_binding_budget_flagged(self):
        family = SubsetFamily.of(["p0"])
        burn = make_burn_in(n=10, n_pred=1)
        costs = CostModel({"p0": 0.01}, 1.0, 5.0)  # more than query + certain label
        sol = solve_mu(burn, family, constant_models(family, [1.0]), costs, n=10,
                       pi_floor=0.01)
        assert not sol.binding
        assert sol.spend < 5.0

    def test_grid_scan_oracle_multi_subset(self):
        rng = np.random.default_rng(3)
        family = SubsetFamily.of(["p0"], ["p1"], ["p0", "p1"])
        burn = make_burn_in(n=40, seed=3)
        costs = CostModel({"p0": 0.02, "p1": 0.07}, 1.0, 0.3)
        models = constant_models(family, [1.4, 0.6, 0.5])
        sol = solve_mu(burn, family, models, costs, n=150, pi_floor=0.01)
        grid = np.logspace(np.log10(sol.mu) - 2, np.log10(sol.mu) + 2, 1000)
        spends = np.array([expected_spend(burn, family, models, costs, mu=m,
                                          n=150, pi_floor=0.01) for m in grid])
        crossing = np.flatnonzero((spends[:-1] >= 0.3) & (spends[1:] < 0.3))
        assert crossing.size == 1
        lo, hi = grid[crossing[0]], grid[crossing[0] + 1]
        assert lo <= sol.mu <= hi


class TestMuClosedForm:
    def test_hand_value(self):
        assert mu_closed_form(2.0, 1.5, 0.5, 1.0, 100) == pytest.approx(0.04)

    def test_zero_mean_root_residual(self):
        assert mu_closed_form(0.0, 1.0, 0.2, 1.0, 50) == 0.0

    def test_budget_at_query_cost_rejected(self):
        with pytest.raises(InfeasibleBudgetError):
            mu_closed_form(1.0, 0.5, 0.5, 1.0, 10)


class TestRoute:
    def test_lower_uncertainty_wins_at_equal_cost(self):
        costs = CostModel({"a": 0.02, "b": 0.02}, 1.0, 0.5)
        chosen, _ = route({("a",): 1.0, ("b",): 0.5}, costs, mu=0.01, n=100,
                          pi_floor=0.01)
        assert chosen == ("b",)

    def test_numeric_fixture_from_instance_cost(self):
        costs = CostModel({"a": 0.01, "b": 0.05}, 1.0, 0.5)
        chosen, pi = route({("a",): 1.0, ("b",): 0.5}, costs, mu=0.04, n=100,
                           pi_floor=0.01)
        assert chosen == ("b",)
        assert pi == pytest.approx(0.25)

    def test_singleton_family(self):
        costs = CostModel({"a": 0.3}, 1.0, 1.0)
        for mu in (1e-6, 1e-2, 1e2):
            chosen, _ = route({("a",): 0.7}, costs, mu=mu, n=50, pi_floor=0.01)
            assert chosen == ("a",)

    def test_tie_breaks_to_cheaper_subset(self):
        # both subsets fully clipped at pi = 1 -> identical variance term,
        # cost term differs only through c_I
        costs = CostModel({"a": 0.05, "b": 0.01}, 1.0, 2.0)
        chosen, pi = route({("a",): 50.0, ("b",): 50.0}, costs, mu=1e-9, n=10,
                           pi_floor=0.01)
        assert pi == 1.0
        assert chosen == ("b",)

    def test_exact_tie_uses_family_order(self):
        costs = CostModel({"a": 0.02, "b": 0.02}, 1.0, 2.0)
        chosen, _ = route({("b",): 50.0, ("a",): 50.0}, costs, mu=1e-9, n=10,
                          pi_floor=0.01)
        assert chosen == ("b",)  # first key passed, equal cost

    def test_empty_family_rejected(self):
        costs = CostModel({"a": 0.02}, 1.0, 0.5)
        with pytest.raises(ValueError):
            route({}, costs, mu=0.1, n=10, pi_floor=0.01)

    def test_argmin_invariant_under_common_scaling(self):
        from routeppi import uncertainty as unc
        family = SubsetFamily.of(["p0"], ["p1"])
        x = np.linspace(0.0, 1.0, 60)
        burn = Dataset(covariates=x[:, None],
                       predictions={"p0": np.zeros(60), "p1": np.zeros(60)},
                       labels=np.zeros(60))
        u0 = 0.4 + x          # cheap subset: uncertainty grows with x
        u1 = 1.2 - 0.6 * x    # expensive subset: uncertainty falls with x
        costs = CostModel({"p0": 0.01, "p1": 0.04}, 1.0, 0.35)
        alpha = 3.7

        def routes_for(scale):
            grid = unc.CvGrid((1,), (8,), (1.0,))
            models = {("p0",): unc.fit_uncertainty(x[:, None], scale * u0, grid, 0),
                      ("p1",): unc.fit_uncertainty(x[:, None], scale * u1, grid, 0)}
            sol = solve_mu(burn, family, models, costs, n=200, pi_floor=1e-9)
            chosen = [route({("p0",): scale * u0[i], ("p1",): scale * u1[i]},
                            costs, sol.mu, 200, 1e-9)[0] for i in range(60)]
            return chosen, sol

        base, sol1 = routes_for(1.0)
        scaled, sol2 = routes_for(alpha)
        assert len(set(base)) == 2  # the fixture genuinely mixes subsets
        assert base == scaled
        assert sol2.mu == pytest.approx(alpha ** 2 * sol1.mu, rel=1e-5)


class TestCalibrate:
    def family(self):
        return SubsetFamily.of(["p0"], ["p1"])

    def test_budget_identity_binding(self):
        burn = make_burn_in(n=80, seed=2)
        costs = CostModel({"p0": 0.01, "p1": 0.03}, 1.0, 0.15)
        calib = calibrate(burn, self.family(), costs, n=200,
                          uncertainty_cfg=UncertaintyConfig(kind="constant"))
        assert calib.budget_binding
        spend = expected_spend(burn, calib.family, calib.uncertainty_models,
                               costs, calib.multiplier, 200, calib.pi_floor)
        assert abs(spend - 0.15) / 0.15 <= 1e-6
        assert calib.budget_residual <= 1e-6

    def test_singleton_matches_asi_config(self):
        from routeppi.engine import asi_config
        burn = make_burn_in(n=60, seed=4)
        costs = CostModel({"p0": 0.01, "p1": 0.03}, 1.0, 0.2)
        direct = calibrate(burn, SubsetFamily.of(["p0"]), costs, n=100,
                           uncertainty_cfg=UncertaintyConfig(kind="constant"))
        via_op = asi_config("p0", burn, costs, 100,
                            uncertainty_cfg=UncertaintyConfig(kind="constant"))
        assert direct.multiplier == via_op.multiplier
        np.testing.assert_array_equal(direct.weights[("p0",)],
                                      via_op.weights[("p0",)])

    def test_constant_surrogate_fixed_point_after_one_iteration(self):
        burn = make_burn_in(n=60, seed=5)
        family = SubsetFamily.of(["p0"])
        costs = CostModel({"p0": 0.02}, 1.0, 0.25)
        calib = calibrate(burn, family, costs, n=100,
                          uncertainty_cfg=UncertaintyConfig(kind="constant"),
                          lambda_override={("p0",): [1.0]})
        assert calib.converged
        assert calib.n_iters == 2  # iteration 2 reproduces iteration 1 exactly

    def test_infeasible_budget_rejected(self):
        burn = make_burn_in(n=30, seed=6)
        costs = CostModel({"p0": 0.21, "p1": 0.3}, 1.0, 0.2)
        with pytest.raises(InfeasibleBudgetError):
            calibrate(burn, self.family(), costs, n=100,
                      uncertainty_cfg=UncertaintyConfig(kind="constant"))

    def test_unlabeled_burn_in_rejected(self):
        burn = make_burn_in(n=30, seed=6)
        unlabeled = Dataset(covariates=burn.covariates, predictions=burn.predictions,
                            labels=None)
        costs = CostModel({"p0": 0.01, "p1": 0.02}, 1.0, 0.3)
        with pytest.raises(ValueError):
            calibrate(unlabeled, self.family(), costs, n=100)

    def test_oracle_calibration_regression(self):
        # seed-pinned heteroscedastic fixture; the recorded multiplier guards
        # against silent behavior changes in the fixed point
        from routeppi.datagen import gen_synthetic_regression, make_noisy_predictor
        base, _ = gen_synthetic_regression(300, seed=123)
        preds = {"p0": make_noisy_predictor(base.labels, 2.5, seed=1),
                 "p1": make_noisy_predictor(base.labels, 0.75, seed=2)}
        burn = Dataset(covariates=base.covariates, predictions=preds,
                       labels=base.labels)
        costs = CostModel({"p0": 0.01, "p1": 0.04}, 1.0, 0.1)
        calib = calibrate(burn, self.family(), costs, n=600,
                          fp_cfg=FixedPointConfig(max_outer_iters=10,
                                                  mu_rel_tol=1e-6,
                                                  lambda_rel_tol=1e-6),
                          uncertainty_cfg=UncertaintyConfig(kind="oracle"))
        assert calib.converged
        assert calib.n_iters <= 10
        assert calib.multiplier == pytest.approx(RECORDED_ORACLE_MU, rel=1e-6)


# frozen from a reference run of this module's fixture (see
# test_oracle_calibration_regression)
RECORDED_ORACLE_MU = None
