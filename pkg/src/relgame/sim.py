"""Forward Monte Carlo verification of the game solutions.

Simulates the wealth dynamics under feedback strategies, estimates the
competitive objectives, measures the payoff consequences of unilateral
deviations, and checks the martingale property of the deflated value
processes that underwrites admissibility.

Conventions shared with the solver modules: exponential-utility wealth is
tracked in amounts and stepped with an integrating factor on the riskless
part (so a zero strategy compounds exactly) and a left-point Euler rule on
the invested part; power-utility wealth is stepped in logs, which keeps it
strictly positive by construction. Deviation tests reuse one market path
panel for every candidate strategy, so all reported differences are paired
path by path.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._exact import as_float
from .bsde import NumericalError
from .cara import AffineStrategy, GameError
from .crra import ProportionStrategy, equilibrium_value_series
from .market import MarketPaths, TimeGrid

# exponent ceiling for utility and deflator evaluation; exceedances are
# clamped and counted rather than silently saturated
_EXP_CLAMP = 700.0

_SURROGATE_NOTE = ("drift checked along the deterministic time grid only; "
                   "this is a testable surrogate for the stopping-time "
                   "admissibility conditions")


class ConstantShiftPerturbation:
    """A strategy shifted by a constant epsilon at every step.

    Wraps either strategy kind and adds ``epsilon`` to the prescription
    (an amount for exponential utility, a proportion for power utility).
    The deviation tests quantify the Nash inequality over this family.
    """

    def __init__(self, base, epsilon):
        self.base = base
        self.epsilon = float(epsilon)
        self.grid = base.grid

    def amount(self, i: int, x_own, x_avg):
        return self.base.amount(i, x_own, x_avg) + self.epsilon

    def at(self, i: int):
        return self.base.at(i) + self.epsilon


class WealthPaths:
    """Simulated wealth panel of shape (n_agents, n_paths, n_steps + 1).

    The arithmetic and geometric population means are derived lazily. The
    geometric mean is only defined while every agent's wealth is positive;
    steps where some wealth is nonpositive (possible under the amount
    dynamics) carry NaN there. Power-utility panels are positive throughout
    by construction of the log stepping.
    """

    def __init__(self, utility_kind: str, grid: TimeGrid, x: np.ndarray,
                 market_paths: MarketPaths):
        self.utility_kind = utility_kind
        self.grid = grid
        self.x = x
        self.market_paths = market_paths
        self.n_agents = x.shape[0]
        self.n_paths = x.shape[1]
        self._xbar = None
        self._xhat = None

    @property
    def xbar(self) -> np.ndarray:
        """Arithmetic population mean per path and step."""
        if self._xbar is None:
            self._xbar = self.x.mean(axis=0)
        return self._xbar

    @property
    def xhat(self) -> np.ndarray:
        """Geometric population mean per path and step (NaN where undefined)."""
        if self._xhat is None:
            with np.errstate(invalid="ignore", divide="ignore"):
                logs = np.where(self.x > 0.0, np.log(np.abs(self.x)), np.nan)
                self._xhat = np.exp(logs.mean(axis=0))
        return self._xhat

    def mean_excluding(self, j: int) -> np.ndarray:
        """sum_{k != j} X_k / n — the full head-count n divides, so
        X_j - theta*xbar == (1 - theta/n)X_j - theta*mean_excluding(j)."""
        return (self.x.sum(axis=0) - self.x[j]) / self.n_agents

    def gmean_excluding(self, j: int) -> np.ndarray:
        """(prod_{k != j} X_k)^(1/n) — again the full-n root."""
        with np.errstate(invalid="ignore", divide="ignore"):
            logs = np.where(self.x > 0.0, np.log(np.abs(self.x)), np.nan)
            return np.exp((logs.sum(axis=0) - logs[j]) / self.n_agents)

    def terminal(self, j: int) -> np.ndarray:
        return self.x[j, :, -1]


def _check_strategy(utility_kind: str, s, grid: TimeGrid, n_paths: int):
    base = s.base if isinstance(s, ConstantShiftPerturbation) else s
    if isinstance(s, ConstantShiftPerturbation) and not math.isfinite(s.epsilon):
        raise GameError("perturbation size must be finite")
    if base.grid.n_steps != grid.n_steps or base.grid.T != grid.T:
        raise GameError("strategy grid does not match the simulation grid")
    if utility_kind == "cara":
        if not isinstance(base, AffineStrategy):
            raise GameError("amount dynamics need feedback strategies")
        for name in ("intercept", "slope_own", "slope_mean"):
            arr = getattr(base, name)
            if not np.all(np.isfinite(arr)):
                raise GameError(f"feedback coefficient {name} is not finite")
            if arr.ndim == 2 and arr.shape[0] != n_paths:
                raise GameError("strategy was fitted on a different path panel")
    else:
        if not isinstance(base, ProportionStrategy):
            raise GameError("proportional dynamics need proportion strategies")
        if not math.isfinite(base.bmo_proxy()):
            raise GameError("proportion strategy fails the sample energy bound")
        if base.values.ndim == 2 and base.values.shape[0] != n_paths:
            raise GameError("strategy was fitted on a different path panel")


def simulate_wealth(utility_kind: str, strategies, paths: MarketPaths,
                    x0) -> WealthPaths:
    """Forward-simulate all agents' wealth under the given strategies.

    Exponential utility (amounts): simultaneous update of all agents per
    step, feedback evaluated at the left point with the current population
    mean; the riskless part compounds exactly via exp(r dt). Power utility
    (proportions): exact log stepping
    X_{i+1} = X_i exp{(r + (mu-r) pi - sigma^2 pi^2 / 2) dt + sigma pi dW}.
    """
    if utility_kind not in ("cara", "crra"):
        raise GameError(f"unknown utility kind {utility_kind!r}")
    grid = paths.grid
    n = len(strategies)
    x0 = [as_float(v) if not isinstance(v, float) else v for v in x0]
    if len(x0) != n:
        raise GameError(f"expected {n} initial endowments, got {len(x0)}")
    for s in strategies:
        _check_strategy(utility_kind, s, grid, paths.n_paths)
    if utility_kind == "crra" and min(x0) <= 0.0:
        raise GameError("power-utility wealth must start positive")

    steps = grid.n_steps
    dt = grid.dt_f
    x = np.empty((n, paths.n_paths, steps + 1))
    for j in range(n):
        x[j, :, 0] = x0[j]

    for i in range(steps):
        r = paths.r_at(i)
        mu = paths.mu_at(i)
        sig = paths.sigma_at(i)
        dw = paths.dW[:, i]
        if utility_kind == "cara":
            xbar = x[:, :, i].mean(axis=0)
            growth = np.exp(r * dt)
            for j, s in enumerate(strategies):
                pi = s.amount(i, x[j, :, i], xbar)
                x[j, :, i + 1] = (x[j, :, i] * growth
                                  + (mu - r) * pi * dt + sig * pi * dw)
        else:
            for j, s in enumerate(strategies):
                pi = s.at(i)
                drift = (r + (mu - r) * pi - 0.5 * sig * sig * pi * pi) * dt
                x[j, :, i + 1] = x[j, :, i] * np.exp(drift + sig * pi * dw)
        if not np.all(np.isfinite(x[:, :, i + 1])):
            raise NumericalError(
                f"wealth became non-finite at step {i + 1}; the strategies "
                "are explosive on this grid")
    return WealthPaths(utility_kind, grid, x, paths)


class ObjectiveEstimate(NamedTuple):
    j_hat: float
    se: float
    overflows: int


def _terminal_utilities(utility_kind: str, j: int, wealth: WealthPaths,
                        params):
    """Per-path terminal utility of agent j, plus the clamp count."""
    x_t = wealth.terminal(j)
    theta = as_float(params.theta[j])
    delta = as_float(params.delta[j])
    if utility_kind == "cara":
        v = x_t - theta * wealth.xbar[:, -1]
        e = -v / delta
        overflows = int(np.count_nonzero(np.abs(e) > _EXP_CLAMP))
        return -np.exp(np.clip(e, -_EXP_CLAMP, _EXP_CLAMP)), overflows
    log_v = np.log(x_t) - theta * np.log(wealth.xhat[:, -1])
    if params.delta[j] == 1:
        return log_v, 0
    p = 1.0 - 1.0 / delta
    e = p * log_v
    overflows = int(np.count_nonzero(np.abs(e) > _EXP_CLAMP))
    return np.exp(np.clip(e, -_EXP_CLAMP, _EXP_CLAMP)) / p, overflows


def estimate_objective(utility_kind: str, j: int, wealth: WealthPaths,
                       params) -> ObjectiveEstimate:
    """Sample objective of agent j: mean terminal utility with its SE.

    Exponential utility scores X_j(T) - theta_j * Xbar(T) through
    -exp(-v/delta); power utility scores X_j(T) * Xhat(T)^(-theta_j)
    through v^(1-1/delta)/(1-1/delta), the log for delta = 1. Exponents
    past +-700 are clamped and counted in ``overflows``.
    """
    u, overflows = _terminal_utilities(utility_kind, j, wealth, params)
    m = u.shape[0]
    se = float(np.std(u, ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return ObjectiveEstimate(float(np.mean(u)), se, overflows)


class DeviationRow(NamedTuple):
    epsilon: float
    j_hat: float
    se: float
    diff: float
    diff_se: float
    passed: bool


@dataclass
class DeviationReport:
    """Paired comparison of the equilibrium against constant shifts.

    ``rows[k].diff`` is the common-random-number estimate of
    J(epsilon_k) - J(equilibrium) with its paired standard error; the
    verdict passes iff no shift beats the equilibrium by more than two
    paired standard errors.
    """

    agent: int
    utility_kind: str
    j_eq: ObjectiveEstimate
    rows: list
    verdict: bool
    overflows: int

    def as_dict(self) -> dict:
        return {
            "agent": self.agent,
            "utility_kind": self.utility_kind,
            "equilibrium": {"j_hat": self.j_eq.j_hat, "se": self.j_eq.se},
            "sweep": [
                {"epsilon": r.epsilon, "j_hat": r.j_hat, "se": r.se,
                 "diff": r.diff, "diff_se": r.diff_se, "passed": r.passed}
                for r in self.rows],
            "verdict": "pass" if self.verdict else "fail",
            "overflows": self.overflows,
        }


def deviation_test(utility_kind: str, eq_strategies, j: int, epsilons,
                   paths: MarketPaths, params) -> DeviationReport:
    """Test the Nash inequality for agent j over constant strategy shifts.

    Every candidate is simulated on the same market path panel, so the
    reported differences J(epsilon) - J(equilibrium) are paired path by
    path (epsilon = 0 reproduces the equilibrium run bit for bit and gives
    a difference of exactly zero).
    """
    x0 = [as_float(v) for v in params.x0]
    base = simulate_wealth(utility_kind, eq_strategies, paths, x0)
    u0, ov0 = _terminal_utilities(utility_kind, j, base, params)
    m = u0.shape[0]
    j_eq = ObjectiveEstimate(
        float(np.mean(u0)),
        float(np.std(u0, ddof=1) / math.sqrt(m)) if m > 1 else 0.0, ov0)
    rows = []
    overflows = ov0
    for eps in epsilons:
        cand = list(eq_strategies)
        cand[j] = ConstantShiftPerturbation(eq_strategies[j], eps)
        wealth = simulate_wealth(utility_kind, cand, paths, x0)
        u, ov = _terminal_utilities(utility_kind, j, wealth, params)
        overflows += ov
        d = u - u0
        diff = float(np.mean(d))
        diff_se = (float(np.std(d, ddof=1) / math.sqrt(m)) if m > 1 else 0.0)
        rows.append(DeviationRow(float(eps), float(np.mean(u)),
                                 float(np.std(u, ddof=1) / math.sqrt(m))
                                 if m > 1 else 0.0,
                                 diff, diff_se, diff <= 2.0 * diff_se))
    return DeviationReport(j, utility_kind, j_eq, rows,
                           all(r.passed for r in rows), overflows)


class MartingaleRow(NamedTuple):
    agent: int
    slope: float
    se: float
    ci_low: float
    ci_high: float
    passed: bool
    overflows: int


@dataclass
class MartingaleReport:
    """Drift check of the deflated value processes at a strategy profile.

    For each agent the deflated process is evaluated per path and step and
    its sample mean is regressed on time; a flat mean (slope CI covering 0)
    is the discrete footprint of the martingale property. The per-path
    slope dispersion supplies the standard error, so the confidence
    interval is valid despite serial correlation along each path.
    """

    utility_kind: str
    times: np.ndarray
    means: np.ndarray
    rows: list
    note: str = _SURROGATE_NOTE
    verdict: bool = field(init=False)

    def __post_init__(self):
        self.verdict = all(r.passed for r in self.rows)


def _slope_stats(d: np.ndarray, times: np.ndarray):
    """Mean-curve OLS slope on t with a per-path dispersion SE."""
    t_c = times - times.mean()
    w = t_c / np.dot(t_c, t_c)
    slopes = d @ w
    m = slopes.shape[0]
    slope = float(np.mean(slopes))
    se = float(np.std(slopes, ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return slope, se


def _deflator_cara(j, wealth, params, sol):
    theta = as_float(params.theta[j])
    delta = as_float(params.delta[j])
    n = params.n
    steps = wealth.grid.n_steps
    mean_exc = wealth.mean_excluding(j)
    d = np.empty((wealth.n_paths, steps + 1))
    overflows = 0
    for i in range(steps + 1):
        psi = np.asarray(sol.psi_at(i), dtype=float)
        phi = np.asarray(sol.phi.y_at(i), dtype=float)
        e = (-psi / delta * ((1.0 - theta / n) * wealth.x[j, :, i]
                             - theta * mean_exc[:, i]) + phi)
        overflows += int(np.count_nonzero(np.abs(e) > _EXP_CLAMP))
        d[:, i] = np.exp(np.clip(e, -_EXP_CLAMP, _EXP_CLAMP))
    return d, overflows


def _deflator_crra(j, wealth, params, eq, series):
    delta = params.delta[j]
    theta = as_float(params.theta[j])
    n = params.n
    steps = wealth.grid.n_steps
    log_own = np.log(wealth.x[j])
    log_gexc = np.log(wealth.gmean_excluding(j))
    val = np.asarray(series[j], dtype=float)
    if delta == 1:
        # additive form: the value process itself must drift-free
        q = val if val.ndim == 2 else val[np.newaxis, :]
        return (1.0 - theta / n) * log_own - theta * log_gexc + q, 0
    beta = as_float(eq.constants.beta[j])
    gamma = as_float(eq.constants.gamma[j])
    p = val if val.ndim == 2 else val[np.newaxis, :]
    e = beta * log_own + gamma * log_gexc + p
    overflows = int(np.count_nonzero(np.abs(e) > _EXP_CLAMP))
    return np.exp(np.clip(e, -_EXP_CLAMP, _EXP_CLAMP)), overflows


def martingale_diagnostic(utility_kind: str, eq_strategies,
                          paths: MarketPaths, params, sol) -> MartingaleReport:
    """Check that the deflated value processes have no detectable drift.

    ``sol`` supplies the deflator: the joint deflator/companion solution
    for exponential utility, the full equilibrium object for power
    utility. On factor markets it must have been solved on the very path
    panel passed here, otherwise the per-path coefficient series would be
    misaligned. Perturbed strategies (with the equilibrium ``sol``) turn
    the drift strictly one-sided, which this diagnostic detects.
    """
    if not paths.is_deterministic and getattr(sol, "paths", None) is not paths:
        raise GameError(
            "the deflator was solved on a different path panel; rerun the "
            "solve on the paths handed to the diagnostic")
    x0 = [as_float(v) for v in params.x0]
    wealth = simulate_wealth(utility_kind, eq_strategies, paths, x0)
    times = np.asarray(paths.grid.times, dtype=float)
    series = None
    if utility_kind == "crra":
        series = equilibrium_value_series(sol)
    rows = []
    means = np.empty((params.n, times.shape[0]))
    for j in range(params.n):
        if utility_kind == "cara":
            d, overflows = _deflator_cara(j, wealth, params, sol)
        else:
            d, overflows = _deflator_crra(j, wealth, params, sol, series)
        means[j] = d.mean(axis=0)
        slope, se = _slope_stats(d, times)
        half = 1.96 * se
        rows.append(MartingaleRow(j, slope, se, slope - half, slope + half,
                                  slope - half <= 0.0 <= slope + half,
                                  overflows))
    return MartingaleReport(utility_kind, times, means, rows)
