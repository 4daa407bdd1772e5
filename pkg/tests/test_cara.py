"""Exponential-utility engine tests: BSDE pair, trichotomy, responses, values."""

import math
from fractions import Fraction

import numpy as np
import pytest

from relgame import (
    ClampedAffineMap,
    ConstantMarket,
    DeterministicMarket,
    FactorMarket,
    TimeGrid,
)
from relgame.cara import (
    AffineStrategy,
    AgentParams,
    CaraSolution,
    GameError,
    best_response_cara,
    classify_and_build_equilibrium,
    equilibrium_strategies,
    fixed_point_residual,
    pde_reference_cara,
    solve_cara_bsdes,
    value_cara,
)

BASE = ConstantMarket(r=0.03, mu=0.08, sigma=0.2)       # rho = 1/4
ZERO_RATE = ConstantMarket(r=0.0, mu=0.08, sigma=0.2)   # rho = 2/5
FLAT = ConstantMarket(r=0.05, mu=0.05, sigma=0.2)       # rho = 0


def vasicek_market():
    return FactorMarket(
        kappa=0.8, m=0.03, nu=0.015, F0=0.03,
        r_map=ClampedAffineMap(0.0, 1.0, -0.02, 0.10),
        mu_map=ClampedAffineMap(0.05, 1.0, 0.0, 0.16),
        sigma_map=ClampedAffineMap(0.2, 0.0, 0.2, 0.2),
    )


def zero_strategy(grid):
    z = [Fraction(0)] * (grid.n_steps + 1)
    return AffineStrategy(grid, 0.0, exact_coeffs={
        "intercept": z, "slope_own": z, "slope_mean": z})


class TestAgentParams:
    def test_aggregates_are_exact(self):
        p = AgentParams(delta=[1, 2], theta=[0.5, 0.75], x0=[1, 3])
        assert p.theta_bar == Fraction(5, 8)
        assert p.delta_bar == Fraction(3, 2)
        assert p.x_bar == 2

    @pytest.mark.parametrize("kwargs", [
        dict(delta=[0], theta=[0.5], x0=[1]),
        dict(delta=[1], theta=[1.5], x0=[1]),
        dict(delta=[1], theta=[-0.1], x0=[1]),
        dict(delta=[1], theta=[0.5], x0=[0]),
        dict(delta=[1, 2], theta=[0.5], x0=[1, 1]),
        dict(delta=[], theta=[], x0=[]),
    ])
    def test_rejects_bad_inputs(self, kwargs):
        with pytest.raises(GameError):
            AgentParams(**kwargs)


class TestSolveCaraBsdes:
    def test_constant_market_closed_forms(self):
        grid = TimeGrid(1, 100)
        sol = solve_cara_bsdes(BASE, grid)
        assert sol.is_deterministic
        assert sol.psi_at(0) == pytest.approx(math.exp(0.03), abs=1e-12)
        assert sol.psi_at(100) == 1.0
        assert sol.eta_tilde_at(17) == 0.0
        assert sol.delta_risk_at(17) == 0.0
        assert sol.phi.exact_y_at(0) == Fraction(-1, 32)  # -rho^2/2, rho=1/4
        assert sol.exact_lambda_risk_at(3) == Fraction(1, 4)

    def test_zero_rate_gives_unit_deflator(self):
        sol = solve_cara_bsdes(ZERO_RATE, TimeGrid(1, 10))
        for i in range(11):
            assert sol.exact_psi_at(i) == 1

    def test_piecewise_market(self):
        model = DeterministicMarket(edges=[0, 0.5, 1], r=[0.0, 0.04],
                                    mu=[0.08, 0.04], sigma=[0.2, 0.1])
        sol = solve_cara_bsdes(model, TimeGrid(1, 10))
        # rho is 0.4 then 0: phi(0) = -(0.4^2/2)*0.5 = -0.04
        assert sol.phi.exact_y_at(0) == Fraction(-1, 25)
        assert sol.exact_lambda_risk_at(7) == 0

    def test_factor_model_against_pde(self):
        model = vasicek_market()
        grid = TimeGrid(1, 50)
        ref = pde_reference_cara(model, grid)
        sol = solve_cara_bsdes(model, grid,
                               {"n_paths": 20_000, "seed": 31, "basis_degree": 3})
        psi0 = float(np.mean(sol.psi_at(0)))
        assert psi0 == pytest.approx(ref["psi0"], rel=0.01)
        assert sol.phi.y0 == pytest.approx(ref["phi0"], abs=5e-4)
        assert np.all(np.exp(sol.psi_tilde.y) > 0)


class TestBestResponse:
    def test_merton_for_uncompetitive_agent(self):
        grid = TimeGrid(1, 5)
        sol = solve_cara_bsdes(ZERO_RATE, grid)
        params = AgentParams(delta=[1.3, 1.0], theta=[0.0, 0.5], x0=[1, 1])
        br = best_response_cara(0, params, sol, [zero_strategy(grid)])
        assert br.exact_at(0) == (Fraction(13, 5), 0, 0)  # delta rho/sigma = 2.6
        assert np.all(br.intercept == 2.6)
        assert np.all(br.slope_own == 0.0)

    def test_single_agent_full_weight_is_degenerate(self):
        sol = solve_cara_bsdes(ZERO_RATE, TimeGrid(1, 4))
        params = AgentParams(delta=[1], theta=[1], x0=[1])
        with pytest.raises(GameError, match="n - theta_j"):
            best_response_cara(0, params, sol, [])

    def test_single_agent_partial_weight(self):
        grid = TimeGrid(1, 4)
        sol = solve_cara_bsdes(ZERO_RATE, grid)
        params = AgentParams(delta=[2], theta=[0.5], x0=[1])
        br = best_response_cara(0, params, sol, [])
        # delta/(1-theta) * rho/sigma = 4 * 2 = 8
        assert br.exact_at(2)[0] == 8

    def test_opponent_count_checked(self):
        grid = TimeGrid(1, 4)
        sol = solve_cara_bsdes(ZERO_RATE, grid)
        params = AgentParams(delta=[1, 1], theta=[0.5, 0.5], x0=[1, 1])
        with pytest.raises(GameError, match="opponent"):
            best_response_cara(0, params, sol, [])


class TestTrichotomy:
    def test_unique_case_flagship_numbers(self):
        params = AgentParams(delta=[1, 1], theta=[0.5, 0.5], x0=[1, 1])
        sol = solve_cara_bsdes(ZERO_RATE, TimeGrid(1, 100))
        eq = classify_and_build_equilibrium(params, sol)
        assert eq.classification == "Unique"
        for strat in eq.strategies:
            assert strat.exact_at(0) == (4, 0, 0)
            assert strat.intercept[0] == 4.0  # exactly representable
            assert np.all(strat.intercept == 4.0)
        assert eq.values is not None

    def test_fixed_point_is_exact_on_constant_market(self):
        params = AgentParams(delta=[0.8, 1.7, 2.0], theta=[0.3, 0.5, 0.9],
                             x0=[1, 2, 3])
        sol = solve_cara_bsdes(BASE, TimeGrid(1, 40))
        strategies = equilibrium_strategies(params, sol)
        assert fixed_point_residual(params, sol, strategies) == [0.0, 0.0, 0.0]

    def test_fixed_point_on_factor_model(self):
        params = AgentParams(delta=[1.0, 0.5], theta=[0.4, 0.8], x0=[1, 1])
        model = vasicek_market()
        sol = solve_cara_bsdes(model, TimeGrid(1, 20),
                               {"n_paths": 2000, "seed": 5})
        strategies = equilibrium_strategies(params, sol)
        res = fixed_point_residual(params, sol, strategies)
        assert max(res) <= 1e-12

    def test_none_when_benchmark_full_and_risk_premium_alive(self):
        params = AgentParams(delta=[1, 1], theta=[1, 1], x0=[1, 1])
        sol = solve_cara_bsdes(BASE, TimeGrid(1, 20))
        eq = classify_and_build_equilibrium(params, sol)
        assert eq.classification == "None"
        assert eq.notes

    def test_infinite_when_risk_premium_vanishes(self):
        params = AgentParams(delta=[1, 2], theta=[1, 1], x0=[1, 1])
        sol = solve_cara_bsdes(FLAT, TimeGrid(1, 20))
        eq = classify_and_build_equilibrium(params, sol)
        assert eq.classification == "Infinite"
        assert eq.family["representative"] == "pi_n = 0"
        assert eq.family["rho_over_sigma"] == [0.0] * 21

    def test_infinite_with_injected_zero_risk_solution(self):
        # a synthetic solution whose market-price process is identically zero
        class ZeroRisk(CaraSolution):
            def lambda_risk_l2(self):
                return 0.0

        base = solve_cara_bsdes(BASE, TimeGrid(1, 10))
        synthetic = ZeroRisk(BASE, base.grid, base.psi_tilde, base.phi)
        params = AgentParams(delta=[1, 1], theta=[1, 1], x0=[1, 1])
        eq = classify_and_build_equilibrium(params, synthetic)
        assert eq.classification == "Infinite"

    def test_classification_invariant_under_relabeling(self):
        sol = solve_cara_bsdes(BASE, TimeGrid(1, 10))
        a = AgentParams(delta=[1, 2, 3], theta=[0.2, 0.9, 1.0], x0=[1, 1, 1])
        b = AgentParams(delta=[3, 1, 2], theta=[1.0, 0.2, 0.9], x0=[1, 1, 1])
        ca = classify_and_build_equilibrium(a, sol)
        cb = classify_and_build_equilibrium(b, sol)
        assert ca.classification == cb.classification == "Unique"
        assert ca.strategies[1].exact_at(0) == cb.strategies[2].exact_at(0)

    def test_wealth_independence_on_deterministic_models(self):
        params = AgentParams(delta=[1, 2], theta=[0.5, 0.5], x0=[1, 1])
        model = DeterministicMarket(edges=[0, 0.5, 1], r=[0.01, 0.03],
                                    mu=[0.06, 0.09], sigma=[0.25, 0.2])
        sol = solve_cara_bsdes(model, TimeGrid(1, 16))
        for strat in equilibrium_strategies(params, sol):
            assert np.all(strat.slope_own == 0.0)
            assert np.all(strat.slope_mean == 0.0)


class TestValues:
    def test_flagship_value(self):
        params = AgentParams(delta=[1, 1], theta=[0.5, 0.5], x0=[1, 1])
        sol = solve_cara_bsdes(ZERO_RATE, TimeGrid(1, 100))
        vals = value_cara(params, sol)
        assert vals == pytest.approx([-math.exp(-0.58)] * 2, rel=1e-14)

    def test_zero_exponent_gives_minus_one(self):
        # x_j = theta_j xbar and a vanished companion solution: V = -1 exactly
        params = AgentParams(delta=[1, 1], theta=[1, 1], x0=[1, 1])
        sol = solve_cara_bsdes(FLAT, TimeGrid(1, 10))
        assert value_cara(params, sol) == [-1.0, -1.0]

    def test_values_always_negative(self):
        params = AgentParams(delta=[0.5, 3], theta=[0.0, 1.0], x0=[5, 0.2])
        sol = solve_cara_bsdes(BASE, TimeGrid(2, 50))
        assert all(v < 0 for v in value_cara(params, sol))
