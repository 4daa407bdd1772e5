"""Competitive portfolio games under relative performance.

Solvers for the n-agent Nash equilibria of CARA (wealth-difference) and
CRRA (wealth-ratio) portfolio games driven by a single Brownian market,
their mean-field limits, Monte Carlo verification machinery, and a
scenario-runner CLI.
"""

__version__ = "0.1.0"

from .bsde import (
    BsdeGridSolution,
    FdConfig,
    LinearBsdeProblem,
    NumericalError,
    QuadraticDriverSpec,
    pde_oracle,
    solve_closed_form,
    solve_linear_girsanov,
    solve_quadratic_regression,
)
from .cara import (
    AffineStrategy,
    AgentParams,
    CaraEquilibrium,
    CaraSolution,
    GameError,
    best_response_cara,
    classify_and_build_equilibrium,
    equilibrium_strategies,
    pde_reference_cara,
    solve_cara_bsdes,
    value_cara,
)
from .crra import (
    CrraConstants,
    CrraEquilibrium,
    ProportionStrategy,
    best_response_crra,
    compute_constants,
    decoupling_residual,
    equilibrium_value_series,
    solve_equilibrium_crra,
    solve_value_bsdes,
)
from .market import (
    ClampedAffineMap,
    ConstantMarket,
    DeterministicMarket,
    FactorMarket,
    MarketError,
    MarketPaths,
    TabulatedMap,
    TimeGrid,
    ValidationReport,
    simulate_paths,
    validate_model,
)
from .meanfield import (
    DiscreteDistribution,
    MeanFieldParams,
    convergence_check,
    limit_constants,
    limit_strategy,
)
from .sim import (
    ConstantShiftPerturbation,
    DeviationReport,
    MartingaleReport,
    ObjectiveEstimate,
    WealthPaths,
    deviation_test,
    estimate_objective,
    martingale_diagnostic,
    simulate_wealth,
)

__all__ = [
    "__version__",
    "AffineStrategy",
    "AgentParams",
    "BsdeGridSolution",
    "CaraEquilibrium",
    "CaraSolution",
    "ConstantShiftPerturbation",
    "CrraConstants",
    "CrraEquilibrium",
    "DeviationReport",
    "DiscreteDistribution",
    "FdConfig",
    "GameError",
    "LinearBsdeProblem",
    "MartingaleReport",
    "MeanFieldParams",
    "NumericalError",
    "ObjectiveEstimate",
    "ProportionStrategy",
    "QuadraticDriverSpec",
    "WealthPaths",
    "ClampedAffineMap",
    "ConstantMarket",
    "DeterministicMarket",
    "FactorMarket",
    "MarketError",
    "MarketPaths",
    "TabulatedMap",
    "TimeGrid",
    "ValidationReport",
    "best_response_cara",
    "best_response_crra",
    "classify_and_build_equilibrium",
    "compute_constants",
    "convergence_check",
    "decoupling_residual",
    "deviation_test",
    "equilibrium_strategies",
    "equilibrium_value_series",
    "estimate_objective",
    "limit_constants",
    "limit_strategy",
    "martingale_diagnostic",
    "pde_oracle",
    "pde_reference_cara",
    "simulate_paths",
    "simulate_wealth",
    "solve_cara_bsdes",
    "solve_closed_form",
    "solve_equilibrium_crra",
    "solve_linear_girsanov",
    "solve_quadratic_regression",
    "solve_value_bsdes",
    "value_cara",
]
