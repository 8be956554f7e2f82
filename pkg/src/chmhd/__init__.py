"""Finite element solver for two-phase Cahn-Hilliard MHD flow with large density ratios."""

__version__ = "0.1.0"

from .mesh import Mesh, Rect, build_mesh, classify_boundary  # noqa: E402
from .physics import PhysParams, ExactSolution, initial_conditions, manufactured_forcing  # noqa: E402
from .scheme import (  # noqa: E402
    BCSet, SolverConfig, State, bubble_bcs, initial_state, newton_step, no_slip_bcs, run,
)
from .diagnostics import bubble_centroid, discrete_energy, eoc, error_norms, mass  # noqa: E402

__all__ = [
    "__version__", "Mesh", "Rect", "build_mesh", "classify_boundary", "PhysParams",
    "ExactSolution", "initial_conditions", "manufactured_forcing", "BCSet", "SolverConfig",
    "State", "bubble_bcs", "initial_state", "newton_step", "no_slip_bcs", "run",
    "bubble_centroid", "discrete_energy", "eoc", "error_norms", "mass",
]
