"""Exponential-utility game engine.

Agents maximize expected CARA utility of terminal wealth relative to the
arithmetic population average. The engine solves the pair of auxiliary
BSDEs — the positive deflator (psi, eta), obtained from its log transform,
and the companion (phi, Delta) — classifies the Nash-equilibrium trichotomy
driven by the mean competition weight, and produces the equilibrium
feedback strategies and values.

Strategies are affine in (own wealth, population-average wealth); on
Constant/Deterministic markets every coefficient is exact rational
arithmetic end to end, so fixed-point identities hold with zero residual.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from ._exact import as_float, exact, exact_mean
from .bsde import (
    BsdeGridSolution,
    FdConfig,
    LinearBsdeProblem,
    QuadraticDriverSpec,
    pde_oracle,
    solve_closed_form,
    solve_linear_girsanov,
    solve_quadratic_regression,
)
from .market import MarketPaths, TimeGrid, simulate_paths, validate_model

#: driver of the log-deflator equation: g(t, z) = r - rho z - z^2/2
LOG_DEFLATOR_SPEC = QuadraticDriverSpec.make(a0_r=1, a1_rho=-1, a2=Fraction(-1, 2))

_THETA_TOL = 1e-12
_CASE3_TOL = 1e-3


class GameError(ValueError):
    """Invalid game parameters or an ill-posed request."""


class AgentParams:
    """Finite roster of agents: risk tolerances, competition weights, wealths.

    delta_j > 0, theta_j in [0, 1], x0_j > 0. Values are held as exact
    rationals (floats are read at their shortest decimal meaning).
    """

    def __init__(self, delta, theta, x0):
        self.delta = [exact(d) for d in delta]
        self.theta = [exact(t) for t in theta]
        self.x0 = [exact(x) for x in x0]
        self.n = len(self.delta)
        if self.n < 1:
            raise GameError("need at least one agent")
        if not (len(self.theta) == len(self.x0) == self.n):
            raise GameError("delta, theta and x0 must have equal lengths")
        for j, d in enumerate(self.delta):
            if d <= 0:
                raise GameError(f"risk tolerance of agent {j} must be > 0, got {d}")
        for j, t in enumerate(self.theta):
            if not 0 <= t <= 1:
                raise GameError(f"competition weight of agent {j} must lie in [0, 1]")
        for j, x in enumerate(self.x0):
            if x <= 0:
                raise GameError(f"initial wealth of agent {j} must be > 0")
        self.theta_bar = exact_mean(self.theta)
        self.delta_bar = exact_mean(self.delta)
        self.x_bar = exact_mean(self.x0)

    def __repr__(self):
        return (f"AgentParams(n={self.n}, delta={[str(d) for d in self.delta]}, "
                f"theta={[str(t) for t in self.theta]})")


class AffineStrategy:
    """Investment amount pi_t = intercept + slope_own*X_own + slope_mean*X_avg.

    Coefficients are per-step vectors of shape (n_steps+1,) (deterministic)
    or per-path arrays of shape (n_paths, n_steps+1). Deterministic
    strategies may carry exact rational coefficients in ``exact_coeffs``
    with keys 'intercept', 'slope_own', 'slope_mean'.
    """

    def __init__(self, grid: TimeGrid, intercept, slope_own=0.0, slope_mean=0.0,
                 exact_coeffs: dict | None = None):
        self.grid = grid
        self.intercept = self._as_series(intercept)
        self.slope_own = self._as_series(slope_own)
        self.slope_mean = self._as_series(slope_mean)
        self.exact_coeffs = exact_coeffs

    def _as_series(self, v):
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            return np.full(self.grid.n_steps + 1, float(arr))
        return arr

    @property
    def is_deterministic(self) -> bool:
        return (self.intercept.ndim == 1 and self.slope_own.ndim == 1
                and self.slope_mean.ndim == 1)

    def coeffs_at(self, i: int):
        """(intercept, slope_own, slope_mean) at step i, scalars or per-path."""
        pick = lambda a: a[i] if a.ndim == 1 else a[:, i]
        return pick(self.intercept), pick(self.slope_own), pick(self.slope_mean)

    def amount(self, i: int, x_own, x_avg):
        a, b, m = self.coeffs_at(i)
        return a + b * x_own + m * x_avg

    def exact_at(self, i: int):
        if self.exact_coeffs is None:
            raise GameError("strategy carries no exact coefficients")
        e = self.exact_coeffs
        return e["intercept"][i], e["slope_own"][i], e["slope_mean"][i]


class CaraSolution:
    """Joint solution of the deflator and companion equations.

    ``psi_tilde`` solves the log-transformed deflator equation (so
    psi = exp(psi_tilde) > 0 with psi(T) = 1 by construction); ``phi``
    solves the companion linear equation with terminal 0. The market-price
    process lambda_risk = rho + Delta + eta/psi is exposed per step.
    """

    def __init__(self, model, grid: TimeGrid, psi_tilde: BsdeGridSolution,
                 phi: BsdeGridSolution, paths: MarketPaths | None = None):
        self.model = model
        self.grid = grid
        self.psi_tilde = psi_tilde
        self.phi = phi
        self.paths = paths
        if psi_tilde.is_deterministic and psi_tilde.y_exact is not None:
            # embed the exponential once; every downstream formula reuses
            # the same rational so algebraic cancellations stay exact
            self._psi_exact = [exact(math.exp(as_float(v)))
                               for v in psi_tilde.y_exact]
        else:
            self._psi_exact = None

    @property
    def is_deterministic(self) -> bool:
        return self.psi_tilde.is_deterministic and self.phi.is_deterministic

    @property
    def is_exact(self) -> bool:
        """True when both equations carry rational payloads (closed-form
        route); the regression route stays float even on stateless paths."""
        return self._psi_exact is not None and self.phi.y_exact is not None

    def psi_at(self, i: int):
        if self._psi_exact is not None:
            return as_float(self._psi_exact[i])
        return np.exp(self.psi_tilde.y_at(i))

    def exact_psi_at(self, i: int) -> Fraction:
        if self._psi_exact is None:
            raise GameError("psi is only exact on deterministic models")
        return self._psi_exact[i]

    def eta_tilde_at(self, i: int):
        """eta/psi, the log-deflator volatility."""
        return self.psi_tilde.z_at(i)

    def eta_at(self, i: int):
        return self.psi_tilde.z_at(i) * self.psi_at(i)

    def delta_risk_at(self, i: int):
        """Volatility Delta of the companion equation."""
        return self.phi.z_at(i)

    def _rho_at(self, i: int):
        if self.paths is not None:
            return self.paths.rho_at(i)
        r, mu, sigma = self.model.value_at(self.grid.time_at(i))
        return as_float((mu - r) / sigma)

    def exact_lambda_risk_at(self, i: int) -> Fraction:
        if not self.is_deterministic:
            raise GameError("lambda_risk is only exact on deterministic models")
        r, mu, sigma = self.model.value_at(self.grid.time_at(i))
        return (mu - r) / sigma  # Delta and eta vanish identically

    def lambda_risk_at(self, i: int):
        """rho + Delta + eta/psi at step i (scalar or per-path)."""
        if self.is_deterministic:
            return as_float(self.exact_lambda_risk_at(i))
        return self._rho_at(i) + self.delta_risk_at(i) + self.eta_tilde_at(i)

    def lambda_risk_l2(self) -> float:
        """Sample L2(dt x dP) norm of lambda_risk over the grid."""
        dt = self.grid.dt_f
        total = 0.0
        for i in range(self.grid.n_steps):
            lam = np.asarray(self.lambda_risk_at(i), dtype=float)
            total += float(np.mean(lam * lam)) * dt
        return math.sqrt(total)

    def sigma_at(self, i: int):
        if self.paths is not None:
            return self.paths.sigma_at(i)
        _, _, sigma = self.model.value_at(self.grid.time_at(i))
        return as_float(sigma)

    def exact_sigma_at(self, i: int) -> Fraction:
        _, _, sigma = self.model.value_at(self.grid.time_at(i))
        return sigma


class CaraEquilibrium:
    """Trichotomy outcome with equilibrium data when it exists."""

    def __init__(self, classification: str, strategies=None, values=None,
                 family=None, notes=None):
        self.classification = classification
        self.strategies = strategies
        self.values = values
        self.family = family
        self.notes = notes or []

    def as_dict(self) -> dict:
        out = {"classification": self.classification, "notes": list(self.notes)}
        if self.values is not None:
            out["values"] = [float(v) for v in self.values]
        if self.family is not None:
            out["family"] = self.family
        return out


def solve_cara_bsdes(model, grid: TimeGrid, numerics=None,
                     paths: MarketPaths | None = None,
                     method: str = "auto") -> CaraSolution:
    """Solve the deflator pair (psi, eta) and companion pair (phi, Delta).

    Constant/Deterministic models take the exact closed-form path (both
    equations integrate in rational arithmetic; psi needs one exponential).
    Factor models run the regression solver on the log-deflator equation
    and the change-of-measure solver on the companion one, sharing a path
    bundle. ``method="mc"`` forces the regression route even on
    deterministic models, so the two routes can be compared on problems
    with known answers.

    ``numerics`` (used only on the regression route unless ``paths`` is
    given) carries n_paths, seed and basis_degree attributes or dict keys.
    """
    if method not in ("auto", "mc"):
        raise GameError(f"unknown method {method!r}")
    report = validate_model(model)
    if not report.ok:
        raise GameError("; ".join(report.errors))
    if getattr(model, "is_deterministic", False) and method == "auto":
        psi_tilde = solve_closed_form(LOG_DEFLATOR_SPEC, model, grid)
        segs = [(length, Fraction(0), -(mu - r) / s, -((mu - r) / s) ** 2 / 2)
                for length, r, mu, s in model.segments(grid)]
        phi_problem = LinearBsdeProblem(a=0.0, b=0.0, c=0.0, terminal=0.0,
                                        segments=segs)
        phi = solve_closed_form(phi_problem, model, grid)
        return CaraSolution(model, grid, psi_tilde, phi)

    opts = _numerics(numerics)
    if paths is None:
        paths = simulate_paths(model, grid, opts["n_paths"], opts["seed"])
    deg = opts["basis_degree"]
    psi_tilde = solve_quadratic_regression(LOG_DEFLATOR_SPEC, paths, deg)

    def load(i, p):
        return p.rho_at(i) + psi_tilde.z_at(i)

    phi_problem = LinearBsdeProblem(
        a=0.0,
        b=lambda i, p: -load(i, p),
        c=lambda i, p: -0.5 * load(i, p) ** 2,
        terminal=0.0,
    )
    phi = solve_linear_girsanov(phi_problem, paths, deg)
    return CaraSolution(model, grid, psi_tilde, phi, paths)


def _numerics(numerics) -> dict:
    out = {"n_paths": 20_000, "seed": 0, "basis_degree": 3, "bmo_cap": None}
    if numerics is None:
        return out
    if isinstance(numerics, dict):
        src = numerics
    else:
        src = {k: getattr(numerics, k) for k in out if hasattr(numerics, k)}
    for k in out:
        if src.get(k) is not None:
            out[k] = src[k]
    return out


def pde_reference_cara(model, grid: TimeGrid, fd: FdConfig | None = None) -> dict:
    """Finite-difference reference for psi(0) and phi(0) on a Factor model.

    The companion equation's coefficients involve the log-deflator
    volatility, so its PDE consumes the first solve's z-surface.
    """
    fd = fd or FdConfig()
    psi_ref = pde_oracle(LOG_DEFLATOR_SPEC, model, grid, fd)

    def load_nodes(t, f):
        r = np.asarray(model.r_map(f), dtype=float)
        mu = np.asarray(model.mu_map(f), dtype=float)
        sig = np.asarray(model.sigma_map(f), dtype=float)
        return (mu - r) / sig + np.asarray(psi_ref.z_interp(t, f), dtype=float)

    phi_problem = LinearBsdeProblem(
        a=0.0, b=0.0, c=0.0, terminal=0.0,
        b_nodes=lambda t, f: -load_nodes(t, f),
        c_nodes=lambda t, f: -0.5 * load_nodes(t, f) ** 2,
    )
    phi_ref = pde_oracle(phi_problem, model, grid, fd)
    return {
        "psi0": math.exp(psi_ref.y0),
        "phi0": phi_ref.y0,
        "psi_tilde": psi_ref,
        "phi": phi_ref,
    }


def best_response_cara(j: int, params: AgentParams, sol: CaraSolution,
                       opponents: list[AffineStrategy]) -> AffineStrategy:
    """Unique admissible best response of agent j to the opponents' strategies.

    pi_j = -n eta/((n-theta_j) sigma psi) (X_j - theta_j Xbar)
           + theta_j/(n-theta_j) sum_{k != j} pi_k
           + n delta_j/((n-theta_j) sigma psi) (rho + Delta + eta/psi).

    Opponents must be affine in (own wealth, average wealth) with a common
    own-wealth slope, so their sum folds through n*Xbar = sum_k X_k and the
    response is again affine in (X_j, Xbar).
    """
    n = params.n
    theta_j = params.theta[j]
    delta_j = params.delta[j]
    if n == theta_j:
        raise GameError(
            "best response undefined: n - theta_j = 0 (single agent with "
            "full competition weight)")
    if len(opponents) != n - 1:
        raise GameError(f"expected {n - 1} opponent strategies, got {len(opponents)}")

    if sol.is_exact and all(
            o.exact_coeffs is not None for o in opponents):
        return _best_response_exact(j, params, sol, opponents)

    grid = sol.grid
    steps = grid.n_steps + 1
    own_slopes = [np.asarray(o.slope_own) for o in opponents]
    for s in own_slopes[1:]:
        if s.shape != own_slopes[0].shape or not np.array_equal(s, own_slopes[0]):
            raise GameError(
                "opponents with differing own-wealth slopes do not fold into "
                "an affine response; unsupported")
    b_opp = own_slopes[0] if opponents else np.zeros(steps)
    sum_int = sum((o.intercept for o in opponents), np.zeros(steps))
    sum_mean = sum((o.slope_mean for o in opponents), np.zeros(steps))

    fn = float(n)
    ft, fd_ = as_float(theta_j), as_float(delta_j)
    denom = fn - ft
    # build per-step to honor per-path psi/eta without materializing extras
    cols_i, cols_o, cols_m = [], [], []
    for i in range(steps):
        psi = sol.psi_at(i)
        sig = sol.sigma_at(i)
        eta_t = sol.eta_tilde_at(i)  # eta/psi
        lam = sol.lambda_risk_at(i)
        wealth_load = fn * eta_t / (denom * sig)  # n eta/((n-theta) sigma psi)
        oi = np.asarray(sum_int[..., i] if sum_int.ndim > 1 else sum_int[i])
        ob = np.asarray(b_opp[..., i] if b_opp.ndim > 1 else b_opp[i])
        om = np.asarray(sum_mean[..., i] if sum_mean.ndim > 1 else sum_mean[i])
        cols_i.append(ft / denom * oi + fn * fd_ * lam / (denom * sig * psi))
        cols_o.append(-wealth_load - ft / denom * ob)
        cols_m.append(ft * wealth_load + ft / denom * (fn * ob + om))
    intercept = np.stack([np.broadcast_to(c, np.shape(cols_i[-1])) for c in cols_i],
                         axis=-1) if np.ndim(cols_i[-1]) else np.array(cols_i)
    slope_own = np.stack(cols_o, axis=-1) if np.ndim(cols_o[-1]) else np.array(cols_o)
    slope_mean = np.stack(cols_m, axis=-1) if np.ndim(cols_m[-1]) else np.array(cols_m)
    return AffineStrategy(grid, intercept, slope_own, slope_mean)


def _best_response_exact(j, params, sol, opponents) -> AffineStrategy:
    n, theta_j, delta_j = params.n, params.theta[j], params.delta[j]
    denom = n - theta_j
    grid = sol.grid
    steps = grid.n_steps + 1
    e_int, e_own, e_mean = [], [], []
    for i in range(steps):
        psi = sol.exact_psi_at(i)
        sig = sol.exact_sigma_at(i)
        lam = sol.exact_lambda_risk_at(i)
        oi = sum((o.exact_at(i)[0] for o in opponents), Fraction(0))
        ob = opponents[0].exact_at(i)[1] if opponents else Fraction(0)
        om = sum((o.exact_at(i)[2] for o in opponents), Fraction(0))
        for o in opponents[1:]:
            if o.exact_at(i)[1] != ob:
                raise GameError(
                    "opponents with differing own-wealth slopes do not fold "
                    "into an affine response; unsupported")
        # eta == 0 on deterministic models, so the wealth load vanishes
        e_int.append(theta_j / denom * oi + n * delta_j * lam / (denom * sig * psi))
        e_own.append(-theta_j / denom * ob)
        e_mean.append(theta_j / denom * (n * ob + om))
    return AffineStrategy(
        grid,
        np.array([as_float(v) for v in e_int]),
        np.array([as_float(v) for v in e_own]),
        np.array([as_float(v) for v in e_mean]),
        exact_coeffs={"intercept": e_int, "slope_own": e_own, "slope_mean": e_mean},
    )


def affine_strategy_for_coef(coef: Fraction, sol: CaraSolution) -> AffineStrategy:
    """Feedback strategy with intercept coef*lambda/(sigma*psi) and the
    universal own-wealth slope; coef carries all agent dependence."""
    grid = sol.grid
    steps = grid.n_steps + 1
    if sol.is_exact:
        e_int = []
        for i in range(steps):
            lam = sol.exact_lambda_risk_at(i)
            sig = sol.exact_sigma_at(i)
            psi = sol.exact_psi_at(i)
            e_int.append(coef * lam / (sig * psi))
        zero = [Fraction(0)] * steps
        return AffineStrategy(
            grid, np.array([as_float(v) for v in e_int]),
            exact_coeffs={"intercept": e_int, "slope_own": zero,
                          "slope_mean": zero})
    cols_i, cols_s = [], []
    for i in range(steps):
        lam = sol.lambda_risk_at(i)
        sig = sol.sigma_at(i)
        psi = sol.psi_at(i)
        cols_i.append(as_float(coef) * lam / (sig * psi))
        cols_s.append(-sol.eta_tilde_at(i) / sig)
    return AffineStrategy(grid, np.stack(cols_i, axis=-1),
                          np.stack(cols_s, axis=-1))


def equilibrium_strategies(params: AgentParams, sol: CaraSolution) -> list[AffineStrategy]:
    """Feedback coefficients of the unique equilibrium (theta_bar < 1)."""
    if params.theta_bar >= 1:
        raise GameError("equilibrium coefficients need mean competition weight < 1")
    coef = [params.delta[j]
            + params.delta_bar * params.theta[j] / (1 - params.theta_bar)
            for j in range(params.n)]
    return [affine_strategy_for_coef(c, sol) for c in coef]


def classify_and_build_equilibrium(params: AgentParams, sol: CaraSolution,
                                   tol: float = _THETA_TOL,
                                   tol_case3: float = _CASE3_TOL) -> CaraEquilibrium:
    """Resolve the trichotomy in the mean competition weight.

    theta_bar < 1 - tol: unique equilibrium, with feedback strategies and
    values. |theta_bar - 1| <= tol: degenerate benchmark; the equilibrium
    set is infinite when the market-price process vanishes (sample L2 norm
    below tol_case3, a numerically-detectable stand-in for an exact-null
    condition) and empty otherwise.
    """
    tb = as_float(params.theta_bar)
    if tb < 1.0 - tol:
        strategies = equilibrium_strategies(params, sol)
        values = value_cara(params, sol)
        return CaraEquilibrium("Unique", strategies=strategies, values=values)
    notes = []
    if tb > 1.0 + tol:  # unreachable for validated params; defensive
        raise GameError("mean competition weight exceeds 1")
    norm = sol.lambda_risk_l2()
    notes.append(
        f"mean competition weight at the degenerate value 1; lambda_risk "
        f"sample L2 norm = {norm:.3e} compared against {tol_case3:.1e}")
    if norm < tol_case3:
        steps = sol.grid.n_steps + 1
        rho_over_sigma = [float(np.mean(np.asarray(sol._rho_at(i), dtype=float))
                                / np.mean(np.asarray(sol.sigma_at(i), dtype=float)))
                          for i in range(steps)]
        family = {
            "parameter": "the last agent's strategy process pi_n (arbitrary admissible)",
            "member": "pi_j = pi_n + (rho/sigma) (X_j - X_n)",
            "representative": "pi_n = 0",
            "rho_over_sigma": rho_over_sigma,
        }
        return CaraEquilibrium("Infinite", family=family, notes=notes)
    return CaraEquilibrium("None", notes=notes)


def value_cara(params: AgentParams, sol: CaraSolution) -> list[float]:
    """Equilibrium value of each agent: -exp{-psi(0)(x_j - theta_j xbar)/delta_j + phi(0)}."""
    out = []
    if sol.is_exact:
        psi0 = sol.exact_psi_at(0)
        phi0 = sol.phi.exact_y_at(0)
        for j in range(params.n):
            expo = -psi0 * (params.x0[j] - params.theta[j] * params.x_bar) \
                / params.delta[j] + phi0
            out.append(-math.exp(as_float(expo)))
        return out
    psi0 = float(np.mean(np.asarray(sol.psi_at(0), dtype=float)))
    phi0 = sol.phi.y0
    for j in range(params.n):
        expo = -psi0 * as_float(params.x0[j] - params.theta[j] * params.x_bar) \
            / as_float(params.delta[j]) + phi0
        out.append(-math.exp(expo))
    return out


def fixed_point_residual(params: AgentParams, sol: CaraSolution,
                         strategies: list[AffineStrategy]) -> list[float]:
    """Sup-norm gap between each strategy and the best response to the rest.

    At the unique equilibrium this is the mutual-best-response identity; on
    deterministic models the exact route returns literal zeros.
    """
    out = []
    for j in range(params.n):
        opponents = [strategies[k] for k in range(params.n) if k != j]
        br = best_response_cara(j, params, sol, opponents)
        mine = strategies[j]
        if (br.exact_coeffs is not None and mine.exact_coeffs is not None):
            gap = Fraction(0)
            for key in ("intercept", "slope_own", "slope_mean"):
                for a, b in zip(br.exact_coeffs[key], mine.exact_coeffs[key]):
                    gap = max(gap, abs(a - b))
            out.append(as_float(gap))
            continue
        gap = 0.0
        for a, b in ((br.intercept, mine.intercept),
                     (br.slope_own, mine.slope_own),
                     (br.slope_mean, mine.slope_mean)):
            aa, bb = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
            gap = max(gap, float(np.max(np.abs(aa - bb))) if aa.size else 0.0)
        out.append(gap)
    return out
