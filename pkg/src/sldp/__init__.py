"""Semi-Lagrangian dynamic programming for finite-horizon optimal control on simplicial meshes."""

from __future__ import annotations

from .errors import (
    ConfigError,
    ControlSetError,
    InsufficientDataError,
    InvarianceError,
    LocationError,
    MeshError,
    NumericError,
    RegistryError,
    SearchSpaceError,
    SLDPError,
    TimeGridError,
)
from .harness import ConvergenceReport, estimate_rate, interp_error_study, lemma1_study, run_convergence
from .mesh import BarycentricLocation, BoxDomain, Mesh, build_mesh, interp_scalar, locate
from .oracle import (
    NodeControlSequences,
    PiecewiseConstantControl,
    brute_force_value,
    continuous_cost,
    discrete_functional,
    sequences_from_policy,
)
from .problem import ControlSet, ProblemSpec, check_invariance, discretize_controls, make_problem
from .solver import PolicyTable, TimeGrid, ValueFunction, bellman_update, compute_Lu, solve
from .synthesis import Trajectory, blended_control_sequence, feedback_control, simulate

__version__ = "0.1.0"

__all__ = [
    "BarycentricLocation", "BoxDomain", "ConfigError", "ControlSet", "ControlSetError", "ConvergenceReport",
    "InsufficientDataError", "InvarianceError", "LocationError", "Mesh", "MeshError", "NodeControlSequences",
    "NumericError", "PiecewiseConstantControl", "PolicyTable", "ProblemSpec", "RegistryError", "SLDPError",
    "SearchSpaceError", "TimeGrid", "TimeGridError", "Trajectory", "ValueFunction", "bellman_update",
    "blended_control_sequence", "brute_force_value", "build_mesh", "check_invariance", "compute_Lu",
    "continuous_cost", "discrete_functional", "discretize_controls", "estimate_rate", "feedback_control",
    "interp_error_study", "interp_scalar", "lemma1_study", "locate", "make_problem", "run_convergence",
    "sequences_from_policy", "simulate", "solve",
]
