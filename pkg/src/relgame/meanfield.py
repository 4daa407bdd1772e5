"""Large-population limits of the competitive portfolio games.

As the number of agents grows, equilibrium aggregates converge to
population moments and a single agent's strategy depends on the crowd
only through the distribution of (risk tolerance, competition weight).
This module computes the limiting strategies for finite-support
distributions and measures how fast finite-n equilibria approach them.

The limiting proportion constant is

    K1 = theta_j (1 - delta_j) E[delta] / (1 - E[theta (1 - delta)]) + delta_j,

the n -> infinity limit of the finite-population constant C1_j (the
population mean of delta*gamma converges to E[theta(1-delta)] and
delta_bar to E[delta]); K2 = K1(K1-1), K3 = K1-1 feed the same quadratic
BSDE as the finite game. The exponential-utility limit keeps the n-agent
feedback shape with the intercept coefficient delta_j +
E[delta] theta_j / (1 - E[theta]), available when E[theta] < 1.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from ._exact import as_float, exact
from .bsde import (
    BsdeGridSolution,
    QuadraticDriverSpec,
    solve_closed_form,
    solve_quadratic_regression,
)
from .cara import (
    AgentParams,
    GameError,
    _numerics,
    affine_strategy_for_coef,
    solve_cara_bsdes,
)
from .crra import _strategy_from_solution, compute_constants
from .market import TimeGrid, simulate_paths


class DiscreteDistribution:
    """Finite-support distribution with exact probabilities."""

    def __init__(self, values, probs):
        self.values = [exact(v) for v in values]
        self.probs = [exact(p) for p in probs]
        if len(self.values) != len(self.probs) or not self.values:
            raise GameError("distribution needs matching nonempty values/probs")
        if any(p < 0 for p in self.probs):
            raise GameError("probabilities must be nonnegative")
        if sum(self.probs) != 1:
            raise GameError(f"probabilities sum to {sum(self.probs)}, not 1")

    def mean(self) -> Fraction:
        return sum(p * v for p, v in zip(self.probs, self.values))

    def sample(self, rng: np.random.Generator, size: int) -> list[Fraction]:
        idx = rng.choice(len(self.values), size=size,
                         p=[as_float(p) for p in self.probs])
        return [self.values[i] for i in idx]


class MeanFieldParams:
    """Population distributions of (delta, theta) plus one tagged agent.

    The two coordinates are drawn independently, so mixed moments factor:
    E[theta(1-delta)] = E[theta](1 - E[delta]).
    """

    def __init__(self, delta_values, delta_probs, theta_values, theta_probs,
                 tagged_delta, tagged_theta):
        self.delta = DiscreteDistribution(delta_values, delta_probs)
        self.theta = DiscreteDistribution(theta_values, theta_probs)
        if any(v <= 0 for v in self.delta.values):
            raise GameError("risk tolerance support must be positive")
        if any(not 0 <= v <= 1 for v in self.theta.values):
            raise GameError("competition weight support must lie in [0, 1]")
        self.tagged_delta = exact(tagged_delta)
        self.tagged_theta = exact(tagged_theta)
        if self.tagged_delta <= 0:
            raise GameError("tagged risk tolerance must be positive")
        if not 0 <= self.tagged_theta <= 1:
            raise GameError("tagged competition weight must lie in [0, 1]")

    @property
    def e_delta(self) -> Fraction:
        return self.delta.mean()

    @property
    def e_theta(self) -> Fraction:
        return self.theta.mean()

    @property
    def e_theta_one_minus_delta(self) -> Fraction:
        return self.e_theta * (1 - self.e_delta)


def limit_constants(params: MeanFieldParams):
    """(K1, K2, K3) for the tagged agent, exact."""
    denom = 1 - params.e_theta_one_minus_delta
    if denom == 0:
        # unreachable for validated supports (theta(1-delta) < 1 pointwise),
        # kept against hand-built parameter objects
        raise GameError("population moment E[theta(1-delta)] = 1: the "
                        "limiting constant is singular")
    k1 = (params.tagged_theta * (1 - params.tagged_delta) * params.e_delta
          / denom + params.tagged_delta)
    return k1, k1 * (k1 - 1), k1 - 1


def limit_strategy(params: MeanFieldParams, model, grid: TimeGrid,
                   numerics=None, utility_kind: str = "crra", paths=None):
    """Tagged agent's limiting strategy process.

    ``utility_kind="cara"`` returns the feedback AffineStrategy (amounts,
    requires E[theta] < 1); ``"crra"`` returns the ProportionStrategy
    (K1 rho + Z)/sigma with Z from the K-constant BSDE.
    """
    if utility_kind == "cara":
        if params.e_theta >= 1:
            raise GameError("the exponential-utility limit is only available "
                            "when the mean competition weight is below 1")
        sol = solve_cara_bsdes(model, grid, numerics, paths)
        coef = (params.tagged_delta
                + params.e_delta * params.tagged_theta / (1 - params.e_theta))
        return affine_strategy_for_coef(coef, sol)
    if utility_kind != "crra":
        raise GameError(f"unknown utility kind {utility_kind!r}")

    k1, k2, k3 = limit_constants(params)
    deterministic = getattr(model, "is_deterministic", False)
    steps = grid.n_steps + 1
    if not deterministic and paths is None:
        opts = _numerics(numerics)
        paths = simulate_paths(model, grid, opts["n_paths"], opts["seed"])
    if k1 == 1:
        zeros = np.zeros(steps)
        sol = BsdeGridSolution(grid, "deterministic", zeros, zeros.copy(),
                               scheme="closed_form",
                               y_exact=[Fraction(0)] * steps)
    elif deterministic:
        spec = QuadraticDriverSpec.make(a0_rho2=k2 / 2, a0_r=k3,
                                        a1_rho=k1 - 1, a2=Fraction(1, 2))
        sol = solve_closed_form(spec, model, grid)
    else:
        spec = QuadraticDriverSpec.make(a0_rho2=k2 / 2, a0_r=k3,
                                        a1_rho=k1 - 1, a2=Fraction(1, 2))
        sol = solve_quadratic_regression(spec, paths,
                                         _numerics(numerics)["basis_degree"])
    return _strategy_from_solution(k1, model, grid, sol, paths)


def convergence_check(params: MeanFieldParams,
                      n_values=(100, 1_000, 10_000), resamples: int = 20,
                      seed: int = 0) -> dict:
    """Gap between finite-n constants and the limit across population sizes.

    Each trial builds an n-agent population with the tagged agent plus
    n-1 independent draws from the distributions, computes the tagged
    agent's C1 exactly, and records |C1 - K1|; medians over the trials
    are reported per n.
    """
    k1 = limit_constants(params)[0]
    rng = np.random.default_rng(seed)
    medians = []
    for n in n_values:
        gaps = []
        for _ in range(resamples):
            deltas = [params.tagged_delta] + params.delta.sample(rng, n - 1)
            thetas = [params.tagged_theta] + params.theta.sample(rng, n - 1)
            pop = AgentParams(delta=deltas, theta=thetas, x0=[1] * n)
            c = compute_constants(pop)
            gaps.append(abs(as_float(c.c1[0] - k1)))
        medians.append(float(np.median(gaps)))
    return {
        "n_values": list(n_values),
        "median_gap": medians,
        "K1": as_float(k1),
        "resamples": resamples,
        "seed": seed,
        "monotone_decreasing": all(b <= a for a, b in zip(medians, medians[1:])),
    }
