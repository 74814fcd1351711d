"""Optimal control of a nonlinear Fokker-Planck equation by a repeller population.

Implicit finite-volume solver, exact discrete adjoint gradients, projected
gradient descent over box-constrained controls, and a particle (SDE)
cross-check of the deterministic pipeline.
"""

from .adjoint import solve_adjoint
from .control import AdmissibleSet, make_kernel, nonlocal_drift, project_admissible
from .errors import (
    ConfigurationError,
    FPControlError,
    GridMismatch,
    KernelUnderResolved,
    NumericalBlowup,
    ParticleEscape,
    StepFailed,
)
from .fp import implicit_step, solve_forward, solve_sensitivity
from .grid import Grid, integrate
from .model import builtin_model, gaussian_density, make_cost, validate_hypotheses
from .optimize import (
    ReducedProblem,
    Scenario,
    bang_bang_extract,
    continuation_in_h,
    evaluate_cost,
    gradient_field,
    optimality_residual,
    projected_gradient_solve,
)
from .particle import estimate_density, mc_cost, simulate

__all__ = [
    "AdmissibleSet", "ConfigurationError", "FPControlError", "Grid", "GridMismatch", "KernelUnderResolved",
    "NumericalBlowup", "ParticleEscape", "ReducedProblem", "Scenario", "StepFailed", "bang_bang_extract",
    "builtin_model", "continuation_in_h", "estimate_density", "evaluate_cost", "gaussian_density",
    "gradient_field", "implicit_step", "integrate", "make_cost", "make_kernel", "mc_cost", "nonlocal_drift",
    "optimality_residual", "project_admissible", "projected_gradient_solve", "simulate", "solve_adjoint",
    "solve_forward", "solve_sensitivity", "validate_hypotheses",
]
