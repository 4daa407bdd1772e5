"""Market coefficient models, validation, and path generation.

Three model kinds share one Brownian driver W:

* ``ConstantMarket`` — scalar (r, mu, sigma), stored as exact rationals.
* ``DeterministicMarket`` — piecewise-constant (r, mu, sigma) on shared
  time segments, also exact.
* ``FactorMarket`` — a mean-reverting factor dF = kappa(m - F)dt + nu dW
  driven by the *same* W as the stock, with bounded maps r(F), mu(F),
  sigma(F) (clamped-affine or tabulated), so the market is genuinely
  non-Markovian from the stock's point of view but Markovian in F.

Path generation is counter-based (Philox) in fixed path blocks, so results
are deterministic for a given (seed, grid, n_paths) regardless of how the
work would be scheduled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._exact import Number, as_float, exact

# Paths are drawn block-by-block from independent Philox substreams keyed by
# (seed, block index); block size is part of the determinism contract.
_PATH_BLOCK = 8192


class MarketError(ValueError):
    """Structural or domain error in a market model."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n_steps steps of size dt = T/n_steps."""

    T: Fraction
    n_steps: int

    def __init__(self, T: Number, n_steps: int):
        T = exact(T)
        if T <= 0:
            raise MarketError(f"horizon T must be positive, got {T}")
        if not isinstance(n_steps, int) or isinstance(n_steps, bool) or n_steps < 1:
            raise MarketError(f"n_steps must be a positive integer, got {n_steps!r}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "n_steps", n_steps)

    @property
    def dt(self) -> Fraction:
        return self.T / self.n_steps

    @property
    def dt_f(self) -> float:
        return as_float(self.dt)

    @property
    def times(self) -> np.ndarray:
        """Grid points t_i = i*dt as float64, t_[n_steps] == T exactly."""
        return as_float(self.T) * np.arange(self.n_steps + 1) / self.n_steps

    def time_at(self, i: int) -> Fraction:
        return self.dt * i


@dataclass
class ValidationReport:
    ok: bool
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "errors": list(self.errors),
            "warnings": list(self.warnings),
            "info": dict(self.info),
        }


class ConstantMarket:
    """Constant coefficients (r, mu, sigma); sigma must be positive."""

    kind = "Constant"
    is_deterministic = True

    def __init__(self, r: Number, mu: Number, sigma: Number):
        self.r = exact(r)
        self.mu = exact(mu)
        self.sigma = exact(sigma)

    @property
    def rho(self) -> Fraction:
        """Sharpe ratio (mu - r)/sigma, exact."""
        return (self.mu - self.r) / self.sigma

    def segments(self, grid: TimeGrid) -> list[tuple[Fraction, Fraction, Fraction, Fraction]]:
        """Per-segment (length, r, mu, sigma) covering [0, T]."""
        return [(grid.T, self.r, self.mu, self.sigma)]

    def value_at(self, t) -> tuple[Fraction, Fraction, Fraction]:
        return self.r, self.mu, self.sigma

    def __repr__(self):
        return f"ConstantMarket(r={float(self.r)}, mu={float(self.mu)}, sigma={float(self.sigma)})"


class DeterministicMarket:
    """Piecewise-constant (r, mu, sigma) on shared segments.

    ``edges`` are the K+1 segment boundaries starting at 0; segment k holds
    on [edges[k], edges[k+1]) (last segment closed on the right). A grid
    whose horizon exceeds the last edge is a coverage error.
    """

    kind = "Deterministic"
    is_deterministic = True

    def __init__(self, edges, r, mu, sigma):
        self.edges = [exact(e) for e in edges]
        self.r = [exact(v) for v in r]
        self.mu = [exact(v) for v in mu]
        self.sigma = [exact(v) for v in sigma]
        if len(self.edges) < 2:
            raise MarketError("need at least two segment edges")
        if self.edges[0] != 0:
            raise MarketError("segments must start at t=0")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise MarketError("segment edges must be strictly increasing")
        nseg = len(self.edges) - 1
        for name, vals in (("r", self.r), ("mu", self.mu), ("sigma", self.sigma)):
            if len(vals) != nseg:
                raise MarketError(
                    f"{name} has {len(vals)} values for {nseg} segments (non-covering intervals)"
                )

    def _segment_index(self, t: Fraction) -> int:
        if t < 0 or t > self.edges[-1]:
            raise MarketError(f"t={t} outside covered interval [0, {self.edges[-1]}]")
        for k in range(len(self.edges) - 1):
            if t < self.edges[k + 1]:
                return k
        return len(self.edges) - 2  # t == final edge

    def value_at(self, t) -> tuple[Fraction, Fraction, Fraction]:
        k = self._segment_index(exact(t) if not isinstance(t, Fraction) else t)
        return self.r[k], self.mu[k], self.sigma[k]

    def rho_at(self, t) -> Fraction:
        r, mu, sigma = self.value_at(t)
        return (mu - r) / sigma

    def segments(self, grid: TimeGrid) -> list[tuple[Fraction, Fraction, Fraction, Fraction]]:
        """Per-segment (length, r, mu, sigma) truncated to [0, T]."""
        if grid.T > self.edges[-1]:
            raise MarketError(
                f"grid horizon {grid.T} exceeds model coverage {self.edges[-1]}"
            )
        out = []
        for k in range(len(self.edges) - 1):
            lo, hi = self.edges[k], min(self.edges[k + 1], grid.T)
            if hi <= lo:
                break
            out.append((hi - lo, self.r[k], self.mu[k], self.sigma[k]))
        return out


class ClampedAffineMap:
    """f -> clip(intercept + slope*f, lo, hi)."""

    def __init__(self, intercept: float, slope: float, lo: float, hi: float):
        if not lo <= hi:
            raise MarketError(f"empty clamp interval [{lo}, {hi}]")
        self.intercept = float(intercept)
        self.slope = float(slope)
        self.lo = float(lo)
        self.hi = float(hi)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo, self.hi

    def __call__(self, f):
        return np.clip(self.intercept + self.slope * np.asarray(f, dtype=float), self.lo, self.hi)


class TabulatedMap:
    """Piecewise-linear interpolation on knots, flat beyond the ends."""

    def __init__(self, knots, values):
        self.knots = np.asarray(knots, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.knots.ndim != 1 or self.knots.shape != self.values.shape or len(self.knots) < 2:
            raise MarketError("tabulated map needs matching 1-D knots/values, at least two")
        if np.any(np.diff(self.knots) <= 0):
            raise MarketError("tabulated map knots must be strictly increasing")

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.values.min()), float(self.values.max())

    def __call__(self, f):
        return np.interp(np.asarray(f, dtype=float), self.knots, self.values)


class FactorMarket:
    """Coefficients driven by an OU factor dF = kappa(m - F)dt + nu dW.

    The factor shares the Brownian driver with the stock. Maps must be
    bounded (they are, by construction of the two map types); sigma's lower
    bound must be strictly positive.
    """

    kind = "Factor"
    is_deterministic = False

    def __init__(self, kappa: float, m: float, nu: float, F0: float,
                 r_map, mu_map, sigma_map):
        self.kappa = float(kappa)
        self.m = float(m)
        self.nu = float(nu)
        self.F0 = float(F0)
        self.r_map = r_map
        self.mu_map = mu_map
        self.sigma_map = sigma_map
        if self.kappa < 0:
            raise MarketError("mean-reversion speed kappa must be nonnegative")
        if self.nu < 0:
            raise MarketError("factor volatility nu must be nonnegative")

    @property
    def sigma_bounds(self) -> tuple[float, float]:
        return self.sigma_map.bounds

    def stationary_std(self) -> float:
        if self.kappa == 0.0:
            return 0.0
        return self.nu / np.sqrt(2.0 * self.kappa)


MarketModel = ConstantMarket | DeterministicMarket | FactorMarket


def validate_model(model) -> ValidationReport:
    """Check boundedness/ellipticity invariants; never raises for domain issues."""
    errors: list[str] = []
    warnings: list[str] = []
    info: dict = {"kind": model.kind}

    if isinstance(model, ConstantMarket):
        if model.sigma <= 0:
            errors.append(f"sigma={float(model.sigma)} not bounded away from 0")
        else:
            rho = model.rho
            info["rho"] = as_float(rho)
            if rho == 0:
                warnings.append("rho ≡ 0: the Sharpe ratio vanishes identically")
    elif isinstance(model, DeterministicMarket):
        bad = [k for k, s in enumerate(model.sigma) if s <= 0]
        if bad:
            errors.append(f"sigma not bounded away from 0 on segments {bad}")
        else:
            rhos = [(mu - r) / s for r, mu, s in zip(model.r, model.mu, model.sigma)]
            info["rho_segments"] = [as_float(x) for x in rhos]
            if all(x == 0 for x in rhos):
                warnings.append("rho ≡ 0: the Sharpe ratio vanishes identically")
    elif isinstance(model, FactorMarket):
        lo, hi = model.sigma_bounds
        if lo <= 0:
            errors.append(f"sigma lower bound {lo} not strictly positive")
        info["sigma_bounds"] = [lo, hi]
        info["r_bounds"] = list(model.r_map.bounds)
        info["mu_bounds"] = list(model.mu_map.bounds)
        if lo > 0:
            # probe the maps on a wide factor range to detect a vanishing rho
            s = model.stationary_std()
            span = 8.0 * s + abs(model.F0 - model.m) + 1e-8
            probe = np.linspace(model.m - span, model.m + span, 257)
            probe = np.append(probe, model.F0)
            rho = (model.mu_map(probe) - model.r_map(probe)) / model.sigma_map(probe)
            info["rho_range"] = [float(rho.min()), float(rho.max())]
            if np.all(rho == 0.0):
                warnings.append("rho ≡ 0 on probed factor range")
    else:
        errors.append(f"unknown model type {type(model).__name__}")

    return ValidationReport(ok=not errors, errors=errors, warnings=warnings, info=info)


class MarketPaths:
    """Simulated Brownian increments plus coefficient paths on a grid.

    Coefficient accessors return scalars (floats) for deterministic models
    and per-path arrays of shape (n_paths,) for Factor models; nothing of
    size (n_paths, n_steps) beyond dW and the factor itself is materialized.
    """

    def __init__(self, model, grid: TimeGrid, dW: np.ndarray, factor, seed: int):
        self.model = model
        self.grid = grid
        self.dW = dW
        self.factor = factor  # (n_paths, n_steps+1) or None
        self.seed = seed
        self.n_paths = dW.shape[0]
        if model.is_deterministic:
            times = [grid.time_at(i) for i in range(grid.n_steps + 1)]
            vals = [model.value_at(t) for t in times]
            self._r = np.array([as_float(v[0]) for v in vals])
            self._mu = np.array([as_float(v[1]) for v in vals])
            self._sigma = np.array([as_float(v[2]) for v in vals])

    @property
    def is_deterministic(self) -> bool:
        return self.model.is_deterministic

    def state_at(self, i: int):
        """Regression state at t_i: factor values, or None for stateless models."""
        if self.factor is None:
            return None
        return self.factor[:, i]

    def r_at(self, i: int):
        if self.factor is None:
            return self._r[i]
        return self.model.r_map(self.factor[:, i])

    def mu_at(self, i: int):
        if self.factor is None:
            return self._mu[i]
        return self.model.mu_map(self.factor[:, i])

    def sigma_at(self, i: int):
        if self.factor is None:
            return self._sigma[i]
        return self.model.sigma_map(self.factor[:, i])

    def rho_at(self, i: int):
        return (self.mu_at(i) - self.r_at(i)) / self.sigma_at(i)

    def dump_csv(self, path) -> None:
        """Write per-(path, step) rows; step i carries the increment over
        [t_i, t_{i+1}] and left-endpoint coefficient values (what the Euler
        schemes actually consume)."""
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step", "t", "W_incr", "r", "mu", "sigma", "rho", "factor"])
            for i in range(self.grid.n_steps):
                r, mu, sig = self.r_at(i), self.mu_at(i), self.sigma_at(i)
                rho = self.rho_at(i)
                r = np.broadcast_to(np.asarray(r, dtype=float), (self.n_paths,))
                mu = np.broadcast_to(np.asarray(mu, dtype=float), (self.n_paths,))
                sig = np.broadcast_to(np.asarray(sig, dtype=float), (self.n_paths,))
                rho = np.broadcast_to(np.asarray(rho, dtype=float), (self.n_paths,))
                if self.factor is None:
                    fcol = [""] * self.n_paths
                else:
                    fcol = [repr(float(v)) for v in self.factor[:, i]]
                t = float(times[i])
                for p in range(self.n_paths):
                    w.writerow([p, i, repr(t), repr(float(self.dW[p, i])),
                                repr(float(r[p])), repr(float(mu[p])),
                                repr(float(sig[p])), repr(float(rho[p])), fcol[p]])


def _draw_increments(seed: int, n_paths: int, n_steps: int, dt: float) -> np.ndarray:
    """sqrt(dt)-scaled normal increments from per-block Philox substreams."""
    out = np.empty((n_paths, n_steps))
    scale = np.sqrt(dt)
    for block, start in enumerate(range(0, n_paths, _PATH_BLOCK)):
        stop = min(start + _PATH_BLOCK, n_paths)
        gen = np.random.Generator(np.random.Philox(key=[seed, block]))
        out[start:stop] = scale * gen.standard_normal((stop - start, n_steps))
    return out


def simulate_paths(model, grid: TimeGrid, n_paths: int, seed: int) -> MarketPaths:
    """Generate MarketPaths; Factor kind uses left-point Euler for F."""
    if not isinstance(n_paths, int) or isinstance(n_paths, bool) or n_paths < 1:
        raise MarketError(f"n_paths must be a positive integer, got {n_paths!r}")
    report = validate_model(model)
    if not report.ok:
        raise MarketError("; ".join(report.errors))
    if isinstance(model, DeterministicMarket) and grid.T > model.edges[-1]:
        raise MarketError(
            f"grid horizon {grid.T} exceeds model coverage {model.edges[-1]}"
        )

    dW = _draw_increments(int(seed), n_paths, grid.n_steps, grid.dt_f)
    factor = None
    if isinstance(model, FactorMarket):
        factor = np.empty((n_paths, grid.n_steps + 1))
        factor[:, 0] = model.F0
        dt = grid.dt_f
        for i in range(grid.n_steps):
            F = factor[:, i]
            factor[:, i + 1] = F + model.kappa * (model.m - F) * dt + model.nu * dW[:, i]
    return MarketPaths(model, grid, dW, factor, int(seed))
