"""Finite element solvers for the Westervelt equation with nonlinear damping."""
from .assembly import MaterialSpec, mass_matrix, poisson_solve, stiffness_matrix
from .constants import NormSpec, bochner_norm, lp_norm, poincare_constant, triple_norm, young_constant
from .energy import (check_energy_inequality, decay_fit, energy, energy_report,
                     equipartition_residual, interface_jump, tol_energy)
from .mesh import Mesh, Tag, box_mesh, interval_mesh, read_mesh_text, rect_mesh, write_mesh_text
from .models import DegeneracyError, Model, ModelKind, State, frozen_coefficients
from .stepper import SolverError, Trajectory, check_admissibility, fixed_point_outer, integrate

__all__ = [
    "MaterialSpec", "mass_matrix", "poisson_solve", "stiffness_matrix",
    "NormSpec", "bochner_norm", "lp_norm", "poincare_constant", "triple_norm", "young_constant",
    "check_energy_inequality", "decay_fit", "energy", "energy_report", "equipartition_residual",
    "interface_jump", "tol_energy",
    "Mesh", "Tag", "box_mesh", "interval_mesh", "read_mesh_text", "rect_mesh", "write_mesh_text",
    "DegeneracyError", "Model", "ModelKind", "State", "frozen_coefficients",
    "SolverError", "Trajectory", "check_admissibility", "fixed_point_outer", "integrate",
]
__version__ = "0.1.0"
