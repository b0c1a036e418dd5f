"""Mean-field equilibrium solver and finite-market simulator for a
single-period solar renewable energy certificate market."""

from .errors import (
    ArtifactError,
    ConfigError,
    DimensionError,
    DomainError,
    GridError,
    InvariantError,
    NonConvergenceError,
    RefusalError,
    SolverError,
    SrecError,
)
from .params import (
    ComplianceParams,
    ControlPair,
    DerivedCoefficients,
    MarketConfig,
    RunSettings,
    SchemeSettings,
    SubPopulationParams,
    base_scenario_config,
    single_class_config,
)
from .model import derive_coefficients, optimal_controls, path_cost, penalty, penalty_prime, running_cost
from .solver import EquilibriumSolution, GaussianFlow, ValueSurface, solve_fixed_point
from .simulate import SimulationRun, clearing_price, simulate

__version__ = "0.1.0"
