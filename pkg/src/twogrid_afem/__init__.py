"""Adaptive two-grid P1/P0 finite elements for Dirichlet boundary control of Stokes flow."""
from .adaptivity import AfemConfig, ConvergenceHistory, afem_run, doerfler_mark, rates
from .assembly import FeSystem, assemble, boundary_mass_contact, evaluate_field
from .cases import case_lshape, case_square, compute_errors, get_case, verify_case
from .estimator import classify, compute_estimator, element_indicators
from .kkt import ActiveSetState, solve_kkt
from .mesh import DomainSpec, TwoGridMesh, bisect_coarse, build_initial, lshape, node_patches, unit_square
from .pdas import OptimalityPoint, active_sets, pdas_solve

__version__ = "0.1.0"

__all__ = [
    "AfemConfig",
    "ConvergenceHistory",
    "afem_run",
    "doerfler_mark",
    "rates",
    "FeSystem",
    "assemble",
    "boundary_mass_contact",
    "evaluate_field",
    "case_lshape",
    "case_square",
    "compute_errors",
    "get_case",
    "verify_case",
    "classify",
    "compute_estimator",
    "element_indicators",
    "ActiveSetState",
    "solve_kkt",
    "DomainSpec",
    "TwoGridMesh",
    "bisect_coarse",
    "build_initial",
    "lshape",
    "node_patches",
    "unit_square",
    "OptimalityPoint",
    "active_sets",
    "pdas_solve",
]
