"""Optimal stopping of one-dimensional diffusions: forward values, allocation
indices and recovery of a diffusion from its value curve."""

from .diffusion_core import (Boundary, DiffusionSpec, Domain, EigenPair, GridFunction,
                             hitting_laplace, solve_eigenfunctions, solve_resolvent)
from .errors import StopdexError
from .forward_solver import ForwardProblem, RewardFamily, Strategy, value_curve
from .index_engine import IndexProblem, index_curve, indifference_map
from .inverse_solver import (EarlyInverseProblem, Extension, InverseProblem, detect_atoms,
                             recover_coefficients, round_trip, solve_inverse, verify_candidate)
from .modularity import check_log_submodular, check_log_supermodular
from .montecarlo import Rule, SimConfig, SimEstimate, simulate_hitting_laplace, simulate_value

__all__ = [
    "Boundary", "DiffusionSpec", "Domain", "EigenPair", "GridFunction", "hitting_laplace",
    "solve_eigenfunctions", "solve_resolvent", "StopdexError", "ForwardProblem", "RewardFamily",
    "Strategy", "value_curve", "IndexProblem", "index_curve", "indifference_map",
    "EarlyInverseProblem", "Extension", "InverseProblem", "detect_atoms", "recover_coefficients",
    "round_trip", "solve_inverse", "verify_candidate", "check_log_submodular",
    "check_log_supermodular", "Rule", "SimConfig", "SimEstimate", "simulate_hitting_laplace",
    "simulate_value",
]

__version__ = "0.1.0"
