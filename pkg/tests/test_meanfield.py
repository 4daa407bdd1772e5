"""Large-population limit tests: K-constants, limit strategies, convergence."""

import types
from fractions import Fraction

import numpy as np
import pytest

from relgame import ClampedAffineMap, ConstantMarket, FactorMarket, TimeGrid
from relgame.cara import (
    AgentParams,
    GameError,
    equilibrium_strategies,
    solve_cara_bsdes,
)
from relgame.crra import compute_constants, solve_equilibrium_crra
from relgame.meanfield import (
    DiscreteDistribution,
    MeanFieldParams,
    convergence_check,
    limit_constants,
    limit_strategy,
)

ZERO_RATE = ConstantMarket(r=0.0, mu=0.08, sigma=0.2)  # rho = 2/5


def spread_population(tagged_theta=0.2):
    """delta fixed at 2, theta split evenly between 0.2 and 0.8."""
    return MeanFieldParams(
        delta_values=[2], delta_probs=[1],
        theta_values=[0.2, 0.8], theta_probs=[0.5, 0.5],
        tagged_delta=2, tagged_theta=tagged_theta)


def vasicek_market():
    return FactorMarket(
        kappa=0.8, m=0.03, nu=0.015, F0=0.03,
        r_map=ClampedAffineMap(0.0, 1.0, -0.02, 0.10),
        mu_map=ClampedAffineMap(0.05, 1.0, 0.0, 0.16),
        sigma_map=ClampedAffineMap(0.2, 0.0, 0.2, 0.2),
    )


class TestParams:
    def test_distribution_moments_exact(self):
        p = spread_population()
        assert p.e_delta == 2
        assert p.e_theta == Fraction(1, 2)
        assert p.e_theta_one_minus_delta == Fraction(-1, 2)

    @pytest.mark.parametrize("kwargs", [
        dict(delta_values=[2], delta_probs=[0.9], theta_values=[0.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=0.5),
        dict(delta_values=[2, 1], delta_probs=[0.7, 0.6], theta_values=[0.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=0.5),
        dict(delta_values=[2], delta_probs=[1], theta_values=[1.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=0.5),
        dict(delta_values=[0], delta_probs=[1], theta_values=[0.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=0.5),
        dict(delta_values=[2], delta_probs=[1], theta_values=[0.5],
             theta_probs=[1], tagged_delta=-1, tagged_theta=0.5),
        dict(delta_values=[2], delta_probs=[1], theta_values=[0.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=2),
        dict(delta_values=[2], delta_probs=[0.5, 0.5], theta_values=[0.5],
             theta_probs=[1], tagged_delta=2, tagged_theta=0.5),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(GameError):
            MeanFieldParams(**kwargs)

    def test_negative_probability_rejected(self):
        with pytest.raises(GameError, match="nonnegative"):
            DiscreteDistribution([1, 2], [1.5, -0.5])


class TestLimitConstants:
    def test_spread_population_exact_value(self):
        k1, k2, k3 = limit_constants(spread_population())
        # 0.2*(1-2)*2/(1 - 0.5*(1-2)) + 2 = -0.4/1.5 + 2
        assert k1 == Fraction(26, 15)
        assert k2 == k1 * (k1 - 1)
        assert k3 == k1 - 1

    def test_log_tagged_agent_is_regular(self):
        p = MeanFieldParams(delta_values=[2], delta_probs=[1],
                            theta_values=[0.3], theta_probs=[1],
                            tagged_delta=1, tagged_theta=0.9)
        k1, k2, k3 = limit_constants(p)
        assert (k1, k2, k3) == (1, 0, 0)

    def test_all_log_population_is_regular(self):
        # a pure log population forces E[theta(1-delta)] = 0, which is a
        # perfectly regular point of the limit
        p = MeanFieldParams(delta_values=[1], delta_probs=[1],
                            theta_values=[0.5, 1], theta_probs=[0.5, 0.5],
                            tagged_delta=1, tagged_theta=1)
        assert limit_constants(p)[0] == 1

    def test_exchangeable_population_matches_finite_n_exactly(self):
        p = MeanFieldParams(delta_values=[2], delta_probs=[1],
                            theta_values=[0.6], theta_probs=[1],
                            tagged_delta=2, tagged_theta=0.6)
        k1 = limit_constants(p)[0]
        assert k1 == Fraction(5, 4)
        for n in (1, 2, 7):
            fin = compute_constants(AgentParams(
                delta=[2] * n, theta=[0.6] * n, x0=[1] * n))
            assert fin.c1[0] == k1

    def test_singularity_guard_for_hand_built_params(self):
        stub = types.SimpleNamespace(
            tagged_delta=Fraction(2), tagged_theta=Fraction(1),
            e_delta=Fraction(2), e_theta_one_minus_delta=Fraction(1))
        with pytest.raises(GameError, match="singular"):
            limit_constants(stub)


class TestLimitStrategy:
    def test_crra_flat_market_proportion(self):
        grid = TimeGrid(1, 10)
        s = limit_strategy(spread_population(), ZERO_RATE, grid)
        assert all(s.exact_at(i) == Fraction(26, 15) * 2 for i in range(11))

    def test_crra_log_tagged_agent(self):
        grid = TimeGrid(1, 6)
        p = MeanFieldParams(delta_values=[3], delta_probs=[1],
                            theta_values=[0.4], theta_probs=[1],
                            tagged_delta=1, tagged_theta=0.7)
        s = limit_strategy(p, ZERO_RATE, grid)
        assert all(s.exact_at(i) == 2 for i in range(7))  # rho/sigma

    def test_crra_factor_route(self):
        grid = TimeGrid(1, 8)
        s = limit_strategy(spread_population(), vasicek_market(), grid,
                           numerics={"n_paths": 800, "seed": 4})
        assert s.values.shape == (800, 9)
        assert np.all(np.isfinite(s.values))

    def test_cara_symmetric_limit_equals_finite_game(self):
        # exchangeable population: the limit coefficient and any finite-n
        # coefficient coincide, so the whole strategy series must agree
        grid = TimeGrid(1, 12)
        p = MeanFieldParams(delta_values=[1], delta_probs=[1],
                            theta_values=[0.5], theta_probs=[1],
                            tagged_delta=1, tagged_theta=0.5)
        lim = limit_strategy(p, ZERO_RATE, grid, utility_kind="cara")
        assert lim.exact_at(0) == (4, 0, 0)
        sol = solve_cara_bsdes(ZERO_RATE, grid)
        two = AgentParams(delta=(1, 1), theta=(0.5, 0.5), x0=(1, 1))
        eq = equilibrium_strategies(two, sol)
        assert lim.exact_coeffs["intercept"] == eq[0].exact_coeffs["intercept"]

    def test_cara_heterogeneous_intercept_formula(self):
        grid = TimeGrid(1, 5)
        p = MeanFieldParams(delta_values=[1, 3], delta_probs=[0.25, 0.75],
                            theta_values=[0.2, 0.6], theta_probs=[0.5, 0.5],
                            tagged_delta=2, tagged_theta=0.5)
        s = limit_strategy(p, ZERO_RATE, grid, utility_kind="cara")
        coef = Fraction(2) + p.e_delta * Fraction(1, 2) / (1 - p.e_theta)
        sol = solve_cara_bsdes(ZERO_RATE, grid)
        want = coef * sol.exact_lambda_risk_at(0) / (
            sol.exact_sigma_at(0) * sol.exact_psi_at(0))
        assert s.exact_at(0)[0] == want

    def test_cara_fully_competitive_population_unsupported(self):
        p = MeanFieldParams(delta_values=[2], delta_probs=[1],
                            theta_values=[1], theta_probs=[1],
                            tagged_delta=2, tagged_theta=1)
        with pytest.raises(GameError, match="below 1"):
            limit_strategy(p, ZERO_RATE, TimeGrid(1, 4), utility_kind="cara")

    def test_unknown_utility_kind(self):
        with pytest.raises(GameError, match="unknown utility kind"):
            limit_strategy(spread_population(), ZERO_RATE, TimeGrid(1, 4),
                           utility_kind="quadratic")

    def test_crra_limit_consistent_with_growing_games(self):
        # symmetric-in-distribution check on an actual equilibrium: a large
        # game whose agents all share the tagged profile plays exactly the
        # limit of the exchangeable population
        grid = TimeGrid(1, 6)
        p = MeanFieldParams(delta_values=[0.5], delta_probs=[1],
                            theta_values=[0.8], theta_probs=[1],
                            tagged_delta=0.5, tagged_theta=0.8)
        lim = limit_strategy(p, ZERO_RATE, grid)
        game = AgentParams(delta=[0.5] * 6, theta=[0.8] * 6, x0=[1] * 6)
        eq = solve_equilibrium_crra(game, ZERO_RATE, grid)
        assert lim.exact_values == eq.strategies[0].exact_values


class TestConvergence:
    def test_gap_shrinks_with_population(self):
        rep = convergence_check(spread_population(), n_values=(60, 600),
                                resamples=10, seed=3)
        assert rep["monotone_decreasing"]
        assert rep["median_gap"][-1] < rep["median_gap"][0]
        assert rep["median_gap"][-1] < 0.05
        assert rep["K1"] == pytest.approx(26 / 15)

    def test_report_is_reproducible(self):
        a = convergence_check(spread_population(), n_values=(50,),
                              resamples=5, seed=11)
        b = convergence_check(spread_population(), n_values=(50,),
                              resamples=5, seed=11)
        assert a == b

    def test_degenerate_population_has_zero_gap(self):
        p = MeanFieldParams(delta_values=[2], delta_probs=[1],
                            theta_values=[0.6], theta_probs=[1],
                            tagged_delta=2, tagged_theta=0.6)
        rep = convergence_check(p, n_values=(10, 40), resamples=3, seed=0)
        assert rep["median_gap"] == [0.0, 0.0]
