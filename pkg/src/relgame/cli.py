"""Scenario runner: JSON config in, machine-readable reports out.

``relgame run scenario.json --out reports/`` parses a scenario (market,
agents, utility kind, numerics, requested analyses), executes the
analyses in dependency order, and writes diff-able reports —
``equilibrium.json``, ``deviation.json``, ``martingale.csv``,
``convergence.json`` — plus rendered figures. Reruns with the same seed
produce byte-identical reports except for the ``generated_at`` header
line; figures are outside that contract.
"""

import argparse
import datetime
import hashlib
import json
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from ._exact import as_float
from .bsde import NumericalError
from .cara import (
    AgentParams,
    GameError,
    classify_and_build_equilibrium,
    solve_cara_bsdes,
)
from .cara import fixed_point_residual as _cara_residual
from .crra import (
    decoupling_residual,
    solve_equilibrium_crra,
    solve_value_bsdes,
)
from .crra import fixed_point_residual as _crra_residual
from .market import (
    ClampedAffineMap,
    ConstantMarket,
    DeterministicMarket,
    FactorMarket,
    MarketError,
    TabulatedMap,
    TimeGrid,
    simulate_paths,
)
from .meanfield import MeanFieldParams, convergence_check, limit_constants, limit_strategy
from .sim import deviation_test, martingale_diagnostic


class ConfigError(ValueError):
    """The scenario config is malformed or inconsistent."""


# --------------------------------------------------------------------------
# config schema

_NUMBER_ARRAY = {"type": "array", "items": {"type": "number"}, "minItems": 1}

_CLAMPED_MAP = {
    "type": "object",
    "additionalProperties": False,
    "required": ["intercept", "slope", "lo", "hi"],
    "properties": {
        "intercept": {"type": "number"},
        "slope": {"type": "number"},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
    },
}

_TABULATED_MAP = {
    "type": "object",
    "additionalProperties": False,
    "required": ["knots", "values"],
    "properties": {
        "knots": {"type": "array", "items": {"type": "number"}, "minItems": 2},
        "values": {"type": "array", "items": {"type": "number"}, "minItems": 2},
    },
}

_MAP = {"oneOf": [_CLAMPED_MAP, _TABULATED_MAP]}

_MARKET = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "r", "mu", "sigma"],
            "properties": {
                "kind": {"const": "constant"},
                "r": {"type": "number"},
                "mu": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "edges", "r", "mu", "sigma"],
            "properties": {
                "kind": {"const": "deterministic"},
                "edges": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "r": _NUMBER_ARRAY,
                "mu": _NUMBER_ARRAY,
                "sigma": _NUMBER_ARRAY,
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "kappa", "m", "nu", "F0",
                         "r_map", "mu_map", "sigma_map"],
            "properties": {
                "kind": {"const": "factor"},
                "kappa": {"type": "number", "minimum": 0},
                "m": {"type": "number"},
                "nu": {"type": "number", "minimum": 0},
                "F0": {"type": "number"},
                "r_map": _MAP,
                "mu_map": _MAP,
                "sigma_map": _MAP,
            },
        },
    ]
}

_FINITE_AGENTS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["delta", "theta"],
    "properties": {
        "delta": {"type": "array", "minItems": 1,
                  "items": {"type": "number", "exclusiveMinimum": 0}},
        "theta": {"type": "array", "minItems": 1,
                  "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "x0": {"type": "array", "minItems": 1,
               "items": {"type": "number", "exclusiveMinimum": 0}},
    },
}

_MEANFIELD_AGENTS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["delta_values", "delta_probs", "theta_values", "theta_probs",
                 "tagged_delta", "tagged_theta"],
    "properties": {
        "delta_values": _NUMBER_ARRAY,
        "delta_probs": _NUMBER_ARRAY,
        "theta_values": _NUMBER_ARRAY,
        "theta_probs": _NUMBER_ARRAY,
        "tagged_delta": {"type": "number", "exclusiveMinimum": 0},
        "tagged_theta": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

ANALYSES = ("equilibrium", "values", "decoupling_residual", "deviation_test",
            "martingale", "convergence")

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["market", "agents", "utility"],
    "properties": {
        "market": _MARKET,
        "agents": {"oneOf": [_FINITE_AGENTS, _MEANFIELD_AGENTS]},
        "utility": {"enum": ["cara", "crra", "meanfield-cara", "meanfield-crra"]},
        "analyses": {
            "type": "array",
            "items": {"enum": list(ANALYSES)},
            "uniqueItems": True,
            "minItems": 1,
        },
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["T", "n_steps"],
                    "properties": {
                        "T": {"type": "number", "exclusiveMinimum": 0},
                        "n_steps": {"type": "integer", "minimum": 1},
                    },
                },
                "n_paths": {"type": "integer", "minimum": 2},
                "basis_degree": {"type": "integer", "minimum": 0, "maximum": 8},
                "seed": {"type": "integer", "minimum": 0,
                         "maximum": 2 ** 64 - 1},
                "epsilons": {"type": "array", "minItems": 1,
                             "items": {"type": "number"}},
                "population_sizes": {"type": "array", "minItems": 1,
                                     "items": {"type": "integer", "minimum": 2}},
                "resamples": {"type": "integer", "minimum": 1},
                "tolerances": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "residual": {"type": "number", "exclusiveMinimum": 0},
                        "decoupling": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
    },
}

_ALLOWED_ANALYSES = {
    "cara": {"equilibrium", "values", "deviation_test", "martingale"},
    "crra": {"equilibrium", "values", "deviation_test", "martingale",
             "decoupling_residual"},
    "meanfield-cara": {"equilibrium", "convergence"},
    "meanfield-crra": {"equilibrium", "convergence"},
}

_DEFAULTS = {
    "grid": {"T": 1.0, "n_steps": 100},
    "n_paths": 20_000,
    "basis_degree": 3,
    "seed": 0,
    "epsilons": [-0.5, -0.25, -0.1, 0.1, 0.25, 0.5],
    "population_sizes": [100, 1_000],
    "resamples": 10,
    "tolerances": {"residual": 1e-8, "decoupling": 1e-2},
}


def validate_config(config) -> dict:
    """Schema plus cross-field checks; returns the config with defaults filled."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from e

    utility = config["utility"]
    agents = config["agents"]
    mean_field = utility.startswith("meanfield-")
    if mean_field and "delta_values" not in agents:
        raise ConfigError(
            f"utility {utility!r} needs a population block "
            "(delta_values/probs, theta_values/probs, tagged agent)")
    if not mean_field and "delta" not in agents:
        raise ConfigError(
            f"utility {utility!r} needs a finite roster block (delta, theta)")
    if not mean_field:
        lengths = {k: len(agents[k]) for k in ("delta", "theta", "x0")
                   if k in agents}
        if len(set(lengths.values())) > 1:
            raise ConfigError(f"agent arrays differ in length: {lengths}")

    analyses = config.get("analyses", ["equilibrium"])
    bad = set(analyses) - _ALLOWED_ANALYSES[utility]
    if bad:
        raise ConfigError(
            f"analyses {sorted(bad)} are not available for utility {utility!r} "
            f"(allowed: {sorted(_ALLOWED_ANALYSES[utility])})")

    merged = dict(config)
    merged["analyses"] = [a for a in ANALYSES if a in analyses]
    numerics = dict(config.get("numerics", {}))
    for key, default in _DEFAULTS.items():
        if key not in numerics:
            numerics[key] = default
        elif isinstance(default, dict):
            numerics[key] = {**default, **numerics[key]}
    merged["numerics"] = numerics
    return merged


# --------------------------------------------------------------------------
# builders

def _build_market(block):
    kind = block["kind"]
    if kind == "constant":
        return ConstantMarket(r=block["r"], mu=block["mu"], sigma=block["sigma"])
    if kind == "deterministic":
        return DeterministicMarket(edges=block["edges"], r=block["r"],
                                   mu=block["mu"], sigma=block["sigma"])
    maps = {}
    for name in ("r_map", "mu_map", "sigma_map"):
        spec = block[name]
        if "knots" in spec:
            maps[name] = TabulatedMap(spec["knots"], spec["values"])
        else:
            maps[name] = ClampedAffineMap(spec["intercept"], spec["slope"],
                                          spec["lo"], spec["hi"])
    return FactorMarket(kappa=block["kappa"], m=block["m"], nu=block["nu"],
                        F0=block["F0"], **maps)


def _build_agents(block, utility):
    if utility.startswith("meanfield-"):
        return MeanFieldParams(
            delta_values=block["delta_values"], delta_probs=block["delta_probs"],
            theta_values=block["theta_values"], theta_probs=block["theta_probs"],
            tagged_delta=block["tagged_delta"], tagged_theta=block["tagged_theta"])
    x0 = block.get("x0", [1.0] * len(block["delta"]))
    return AgentParams(delta=block["delta"], theta=block["theta"], x0=x0)


def _series(values):
    """Per-step list from a 1-D series or a per-path 2-D panel (path mean)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        arr = arr.mean(axis=0)
    return [float(v) for v in arr]


def _affine_payload(s, x_own, x_avg):
    return {
        "intercept": _series(s.intercept),
        "slope_own": _series(s.slope_own),
        "slope_mean": _series(s.slope_mean),
        "amount_at_start": float(np.mean(np.asarray(
            s.amount(0, x_own, x_avg), dtype=float))),
    }


def _proportion_payload(s):
    return {
        "proportion": _series(s.values),
        "proportion_at_start": float(np.mean(np.asarray(s.at(0), dtype=float))),
    }


# --------------------------------------------------------------------------
# orchestration

def run_scenario(config, seed_override=None, progress=None) -> dict:
    """Execute the requested analyses; returns the in-memory report bundle.

    The bundle's ``_panel`` entry (the simulated market paths, when any
    were needed) is for path dumping and is not serialized.
    """
    config = validate_config(config)
    say = progress or (lambda msg: None)
    numerics = config["numerics"]
    if seed_override is not None:
        if not 0 <= seed_override < 2 ** 64:
            raise ConfigError(f"seed must fit in u64, got {seed_override}")
        numerics = {**numerics, "seed": int(seed_override)}
    utility = config["utility"]
    analyses = config["analyses"]
    tolerances = numerics["tolerances"]

    model = _build_market(config["market"])
    grid = TimeGrid(numerics["grid"]["T"], numerics["grid"]["n_steps"])
    params = _build_agents(config["agents"], utility)
    opts = {"n_paths": numerics["n_paths"], "seed": numerics["seed"],
            "basis_degree": numerics["basis_degree"]}

    bundle = {
        "utility": utility,
        "market_kind": model.kind,
        "analyses": analyses,
        "provenance": {
            "seed": numerics["seed"],
            "n_paths": numerics["n_paths"],
            "basis_degree": numerics["basis_degree"],
            "tolerances": dict(tolerances),
            "package_version": __version__,
            "numpy_version": np.__version__,
            "python_version": platform.python_version(),
            "config_digest": hashlib.sha256(
                json.dumps(config, sort_keys=True,
                           separators=(",", ":")).encode()).hexdigest(),
        },
        "values": None,
        "deviation": None,
        "martingale": None,
        "convergence": None,
        "verdicts": {},
        "_panel": None,
    }

    if utility == "cara":
        _run_cara(bundle, model, grid, params, opts, analyses, tolerances,
                  numerics["epsilons"], say)
    elif utility == "crra":
        _run_crra(bundle, model, grid, params, opts, analyses, tolerances,
                  numerics["epsilons"], say)
    else:
        _run_meanfield(bundle, model, grid, params, opts, analyses,
                       numerics, utility, say)
    bundle["verdicts"] = {a: bundle["verdicts"][a] for a in analyses}
    return bundle


def _panel_for(model, grid, opts, sol_paths):
    if sol_paths is not None:
        return sol_paths
    return simulate_paths(model, grid, opts["n_paths"], opts["seed"])


def _run_cara(bundle, model, grid, params, opts, analyses, tolerances,
              epsilons, say):
    say("solving the exponential-utility system")
    sol = solve_cara_bsdes(model, grid, numerics=opts)
    eq = classify_and_build_equilibrium(params, sol)
    payload = eq.as_dict()
    x0 = [as_float(v) for v in params.x0]
    xbar0 = sum(x0) / len(x0)
    if eq.classification == "Unique":
        payload["strategies"] = [_affine_payload(s, x0[j], xbar0)
                                 for j, s in enumerate(eq.strategies)]
        residuals = _cara_residual(params, sol, eq.strategies)
        payload["fixed_point_residual"] = residuals
        payload["residual_checked"] = bool(sol.is_exact)
        eq_pass = (max(residuals) <= tolerances["residual"]
                   if sol.is_exact else True)
    else:
        eq_pass = True
    bundle["equilibrium"] = payload
    bundle["verdicts"]["equilibrium"] = eq_pass
    say(f"classification: {eq.classification}")

    if "values" in analyses:
        bundle["values"] = ([float(v) for v in eq.values]
                            if eq.classification == "Unique" else None)
        bundle["verdicts"]["values"] = True

    needs_panel = {"deviation_test", "martingale"} & set(analyses)
    if not needs_panel:
        return
    if eq.classification != "Unique":
        raise GameError(
            f"the requested Monte Carlo diagnostics need a unique "
            f"equilibrium, but the classification is {eq.classification!r}")
    panel = _panel_for(model, grid, opts, sol.paths)
    bundle["_panel"] = panel

    if "deviation_test" in analyses:
        say("running the deviation sweeps")
        reports = [deviation_test("cara", eq.strategies, j, epsilons,
                                  panel, params).as_dict()
                   for j in range(params.n)]
        bundle["deviation"] = reports
        bundle["verdicts"]["deviation_test"] = all(
            r["verdict"] == "pass" for r in reports)

    if "martingale" in analyses:
        say("running the drift diagnostic")
        rep = martingale_diagnostic("cara", eq.strategies, panel, params, sol)
        bundle["martingale"] = _martingale_payload(rep)
        bundle["verdicts"]["martingale"] = rep.verdict


def _run_crra(bundle, model, grid, params, opts, analyses, tolerances,
              epsilons, say):
    say("solving the power-utility system")
    eq = solve_equilibrium_crra(params, model, grid, numerics=opts)
    residuals = _crra_residual(params, eq, numerics=opts)
    payload = {
        "classification": "Unique",
        "constants": eq.constants.as_dict(),
        "strategies": [_proportion_payload(s) for s in eq.strategies],
        "fixed_point_residual": residuals,
        "residual_checked": bool(eq.is_deterministic),
    }
    bundle["equilibrium"] = payload
    bundle["verdicts"]["equilibrium"] = (
        max(residuals) <= tolerances["residual"]
        if eq.is_deterministic else True)

    if "values" in analyses:
        say("solving the value equations")
        vals = solve_value_bsdes(params, eq, model, grid, numerics=opts)
        bundle["values"] = [{k: (None if v is None else float(v))
                             for k, v in d.items()} for d in vals]
        bundle["verdicts"]["values"] = True

    if "decoupling_residual" in analyses:
        say("auditing the decoupled system")
        res = decoupling_residual(params, eq)
        bundle["equilibrium"]["decoupling"] = res
        gauge = [v for k, v in res.items()
                 if k.endswith(("_max", "_l2"))]
        bundle["verdicts"]["decoupling_residual"] = (
            max(gauge) <= tolerances["decoupling"])

    needs_panel = {"deviation_test", "martingale"} & set(analyses)
    if not needs_panel:
        return
    panel = _panel_for(model, grid, opts, eq.paths)
    bundle["_panel"] = panel

    if "deviation_test" in analyses:
        say("running the deviation sweeps")
        reports = [deviation_test("crra", eq.strategies, j, epsilons,
                                  panel, params).as_dict()
                   for j in range(params.n)]
        bundle["deviation"] = reports
        bundle["verdicts"]["deviation_test"] = all(
            r["verdict"] == "pass" for r in reports)

    if "martingale" in analyses:
        say("running the drift diagnostic")
        rep = martingale_diagnostic("crra", eq.strategies, panel, params, eq)
        bundle["martingale"] = _martingale_payload(rep)
        bundle["verdicts"]["martingale"] = rep.verdict


def _run_meanfield(bundle, model, grid, params, opts, analyses, numerics,
                   utility, say):
    kind = utility.split("-", 1)[1]
    say(f"computing the large-population limit ({kind})")
    payload = {
        "population_moments": {
            "E_delta": as_float(params.e_delta),
            "E_theta": as_float(params.e_theta),
            "E_theta_one_minus_delta": as_float(params.e_theta_one_minus_delta),
        },
        "tagged": {"delta": as_float(params.tagged_delta),
                   "theta": as_float(params.tagged_theta)},
    }
    if kind == "crra":
        k1, k2, k3 = limit_constants(params)
        payload["limit_constants"] = {"K1": as_float(k1), "K2": as_float(k2),
                                      "K3": as_float(k3)}
    strategy = limit_strategy(params, model, grid, numerics=opts,
                              utility_kind=kind)
    if kind == "cara":
        coef = (params.tagged_delta
                + params.e_delta * params.tagged_theta / (1 - params.e_theta))
        payload["limit_constants"] = {"intercept_coef": as_float(coef)}
        x0 = 1.0
        payload["strategy"] = _affine_payload(strategy, x0, x0)
    else:
        payload["strategy"] = _proportion_payload(strategy)
    bundle["equilibrium"] = payload
    bundle["verdicts"]["equilibrium"] = True

    if "convergence" in analyses:
        say("measuring the finite-population gap")
        result = convergence_check(
            params, n_values=tuple(numerics["population_sizes"]),
            resamples=numerics["resamples"], seed=numerics["seed"])
        bundle["convergence"] = result
        bundle["verdicts"]["convergence"] = result["monotone_decreasing"]


def _martingale_payload(rep):
    return {
        "times": [float(t) for t in rep.times],
        "means": [[float(v) for v in row] for row in rep.means],
        "rows": [
            {"agent": r.agent, "slope": r.slope, "se": r.se,
             "ci_low": r.ci_low, "ci_high": r.ci_high, "passed": r.passed,
             "overflows": r.overflows}
            for r in rep.rows],
        "note": rep.note,
        "verdict": rep.verdict,
    }


# --------------------------------------------------------------------------
# report writing

def _json_default(obj):
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj).__name__}")


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def write_reports(bundle, out_dir, figures=True, dump_paths=False) -> list:
    """Write the report files (and figures) for a bundle; returns the paths."""
    if dump_paths and bundle["_panel"] is None:
        raise ConfigError(
            "no market paths were simulated for this scenario (closed-form "
            "analyses only); nothing to dump")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    header = {"generated_at": stamp, "provenance": bundle["provenance"]}
    written = []

    eq_report = {
        **header,
        "scenario": {"utility": bundle["utility"],
                     "market_kind": bundle["market_kind"],
                     "analyses": bundle["analyses"]},
        "equilibrium": bundle["equilibrium"],
        "verdicts": bundle["verdicts"],
    }
    if bundle["values"] is not None or "values" in bundle["analyses"]:
        eq_report["values"] = bundle["values"]
    if bundle["martingale"] is not None:
        eq_report["martingale_summary"] = {
            k: bundle["martingale"][k] for k in ("rows", "note", "verdict")}
    path = out / "equilibrium.json"
    _dump_json(path, eq_report)
    written.append(path)

    if bundle["deviation"] is not None:
        path = out / "deviation.json"
        _dump_json(path, {**header, "reports": bundle["deviation"]})
        written.append(path)

    if bundle["martingale"] is not None:
        path = out / "martingale.csv"
        mart = bundle["martingale"]
        n_agents = len(mart["means"])
        with open(path, "w") as fh:
            fh.write("t," + ",".join(f"agent{j}_mean"
                                     for j in range(n_agents)) + "\n")
            for i, t in enumerate(mart["times"]):
                row = [repr(float(t))] + [repr(float(mart["means"][j][i]))
                                          for j in range(n_agents)]
                fh.write(",".join(row) + "\n")
        written.append(path)

    if bundle["convergence"] is not None:
        path = out / "convergence.json"
        _dump_json(path, {**header, "result": bundle["convergence"]})
        written.append(path)

    if dump_paths:
        path = out / "paths.csv"
        bundle["_panel"].dump_csv(path)
        written.append(path)

    if figures:
        written.extend(_render_figures(bundle, out))
    return written


def _render_figures(bundle, out: Path) -> list:
    from . import figures as fig

    written = []
    eq = bundle["equilibrium"]
    times = None
    if bundle["martingale"] is not None:
        times = bundle["martingale"]["times"]

    series = {}
    strategies = eq.get("strategies")
    if strategies is None and "strategy" in eq:
        strategies = {"tagged agent": eq["strategy"]}
    if strategies is not None:
        items = (strategies.items() if isinstance(strategies, dict)
                 else ((f"agent {j}", s) for j, s in enumerate(strategies)))
        for label, s in items:
            if "proportion" in s:
                series[label] = s["proportion"]
            else:
                series[label] = {k: s[k] for k in
                                 ("intercept", "slope_own", "slope_mean")}
    if series:
        any_series = next(iter(series.values()))
        n_pts = len(any_series) if not isinstance(any_series, dict) \
            else len(any_series["intercept"])
        ts = times if times is not None and len(times) == n_pts \
            else list(np.linspace(0.0, 1.0, n_pts))
        kind = "cara" if bundle["utility"].endswith("cara") else "crra"
        written.append(fig.strategy_figure(out / "equilibrium.png", ts,
                                           series, kind))
    if bundle["deviation"] is not None:
        written.append(fig.deviation_figure(out / "deviation.png",
                                            bundle["deviation"]))
    if bundle["martingale"] is not None:
        mart = bundle["martingale"]
        written.append(fig.martingale_figure(out / "martingale.png",
                                             mart["times"], mart["means"],
                                             mart["rows"]))
    if bundle["convergence"] is not None:
        written.append(fig.convergence_figure(out / "convergence.png",
                                              bundle["convergence"]))
    return written


# --------------------------------------------------------------------------
# entry point

_ERROR_KINDS = [
    (ConfigError, "config"),
    (json.JSONDecodeError, "config"),
    (MarketError, "market"),
    (NumericalError, "numerics"),
    (GameError, "game"),
    (OSError, "io"),
]


def _emit_error(exc) -> int:
    kind = next((name for klass, name in _ERROR_KINDS
                 if isinstance(exc, klass)), "internal")
    print(json.dumps({"error": {"type": kind, "message": str(exc)}}),
          file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="relgame",
        description="Competitive portfolio game scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser(
        "run", help="execute a scenario config and write reports")
    runp.add_argument("config", help="path to the scenario JSON")
    runp.add_argument("--out", default="reports",
                      help="report directory (default: ./reports)")
    runp.add_argument("--seed", type=int, default=None,
                      help="override the config seed (u64)")
    runp.add_argument("--strict", action="store_true",
                      help="exit nonzero when any requested verdict fails "
                           "(default: exit 0 once the analyses ran)")
    runp.add_argument("--dump-paths", action="store_true",
                      help="also write the simulated market paths as CSV")
    runp.add_argument("--no-figures", action="store_true",
                      help="skip figure rendering")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            config = json.load(fh)
        bundle = run_scenario(config, seed_override=args.seed,
                              progress=lambda msg: print(f"... {msg}"))
        written = write_reports(bundle, args.out,
                                figures=not args.no_figures,
                                dump_paths=args.dump_paths)
    except Exception as exc:  # noqa: BLE001 — the contract is JSON on stderr
        return _emit_error(exc)

    for analysis, ok in bundle["verdicts"].items():
        print(f"{analysis}: {'pass' if ok else 'FAIL'}")
    print("wrote " + ", ".join(p.name for p in written) + f" in {args.out}")
    if args.strict and not all(bundle["verdicts"].values()):
        failing = [a for a, ok in bundle["verdicts"].items() if not ok]
        print(json.dumps({"error": {
            "type": "verdict",
            "message": f"failing verdicts under --strict: {failing}"}}),
            file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
