"""LQ stochastic control under the expected path constraint E[X_t] >= L_t."""

from meanref_lq.core import Compensator, GridFunction, ProblemSpec, TimeGrid, load_problem, validate_spec
from meanref_lq.errors import MeanRefError
from meanref_lq.obstacle import MeanSolution, optimal_value, solve_constrained, solve_penalized
from meanref_lq.riccati import solve_riccati

__version__ = "0.1.0"

__all__ = [
    "Compensator",
    "GridFunction",
    "MeanRefError",
    "MeanSolution",
    "ProblemSpec",
    "TimeGrid",
    "load_problem",
    "optimal_value",
    "solve_constrained",
    "solve_penalized",
    "solve_riccati",
    "validate_spec",
]
