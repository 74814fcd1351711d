"""Backward Euler scheme for the controlled nonlinear Fokker-Planck equation.

Each step solves

    rho_new - h Lap beta(rho_new) + h div_up(K(zeta) b*(rho_new)) = rho_old

with Newton's method (analytic Jacobian, damped by step halving) and a
Picard fallback on the resolvent form.  The discrete operators are in flux
form with zero flux at the box edge, so mass is conserved to round-off, and
donor-cell upwinding keeps the Jacobian an M-matrix (positivity, L1
contraction) as long as ``b*`` is nondecreasing on the range of the density.

The linearized recursion for a control perturbation ``xi`` lives here too,
since it reuses exactly the same assembled operators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .control import Kernel, nonlocal_drift
from .errors import NumericalBlowup, StepFailed
from .grid import (
    Grid,
    boundary_mass,
    gradient,
    integrate,
    laplacian_matrix,
    upwind_matrix,
)
from .model import InitialDensity, ModelFunctions, project_density

__all__ = [
    "StepInfo",
    "Trajectory",
    "SensitivityTrajectory",
    "StepOperator",
    "implicit_step",
    "solve_forward",
    "linearized_matrix",
    "perturbation_source",
    "solve_sensitivity",
]

log = logging.getLogger(__name__)

CLIP_BUDGET = 1e-8
BOUNDARY_MASS_LIMIT = 1e-8


@dataclass
class StepInfo:
    iterations: int
    residual: float
    mass_drift: float
    min_value: float
    clipped: float
    method: str = "newton"

    def as_dict(self):
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}


class StepOperator:
    """Assembled pieces of one implicit step for a fixed drift field.

    ``drift`` is the cell-centered velocity ``K(zeta)``.  The upwind matrix
    is built once and reused for every step of a trajectory.
    """

    def __init__(self, grid: Grid, drift: np.ndarray):
        self.grid = grid
        self.drift = np.asarray(drift, dtype=float)
        self.lap = laplacian_matrix(grid)
        self.up = upwind_matrix(grid, self.drift)
        self.eye = sp.identity(grid.size, format="csr")

    def residual(self, rho, rho_in, h, model):
        return rho + h * (self.up @ model.b_star(rho) - self.lap @ model.beta(rho)) - rho_in

    def jacobian(self, rho, h, model):
        return (self.eye - h * (self.lap @ sp.diags(model.beta_prime(rho)))
                + h * (self.up @ sp.diags(model.b_star_prime(rho)))).tocsc()

    def picard_matrix(self, rho, h, model):
        # resolvent form frozen at rho: (I - h Lap Psi(rho) + h Up b(rho)) rho_new = rho_in
        return (self.eye - h * (self.lap @ sp.diags(model.psi(rho)))
                + h * (self.up @ sp.diags(model.b(rho)))).tocsc()


def _l1(grid: Grid, v: np.ndarray) -> float:
    return float(np.sum(np.abs(v)) * grid.cell_volume)


def implicit_step(
    rho_in: np.ndarray,
    op: StepOperator,
    h: float,
    model: ModelFunctions,
    tol: float = 1e-11,
    max_iter: int = 50,
    renormalize: bool = True,
) -> tuple[np.ndarray, StepInfo]:
    """One backward Euler step; returns the new density and solver diagnostics.

    Convergence is declared when the L1 norm of the residual drops to ``tol``.
    Negative round-off is clipped and the clipped mass put back by rescaling;
    the clipped amount is reported.
    """
    grid = op.grid
    shape = np.shape(rho_in)
    b = np.asarray(rho_in, dtype=float).ravel()
    rho = b.copy()
    res = op.residual(rho, b, h, model)
    rnorm = _l1(grid, res)
    if not np.isfinite(rnorm):
        raise NumericalBlowup("numerical blowup in residual", residual=rnorm)
    method = "newton"
    it = 0
    stalled = False
    while rnorm > tol and it < max_iter:
        if not np.isfinite(rnorm):
            raise NumericalBlowup("numerical blowup in residual", residual=rnorm)
        it += 1
        delta = spla.spsolve(op.jacobian(rho, h, model), -res)
        t = 1.0
        for _ in range(31):
            trial = rho + t * delta
            tres = op.residual(trial, b, h, model)
            tnorm = _l1(grid, tres)
            if np.isfinite(tnorm) and tnorm < rnorm:
                break
            t *= 0.5
        else:
            stalled = True
            break
        rho, res, rnorm = trial, tres, tnorm
    if stalled or rnorm > tol:
        method = "picard"
        rho = b.copy() if not np.all(np.isfinite(rho)) else np.maximum(rho, 0.0)
        for _ in range(20 * max_iter):
            it += 1
            rho = spla.spsolve(op.picard_matrix(rho, h, model), b)
            res = op.residual(rho, b, h, model)
            rnorm = _l1(grid, res)
            if not np.isfinite(rnorm):
                raise NumericalBlowup("numerical blowup in residual", residual=rnorm)
            if rnorm <= tol:
                break
        else:
            raise StepFailed(f"step failed: residual {rnorm:.3e} > tol {tol:.1e}", residual=rnorm)

    mass_in = float(np.sum(b)) * grid.cell_volume
    mass_out = float(np.sum(rho)) * grid.cell_volume
    mass_drift = mass_out - mass_in
    min_value = float(rho.min())
    clipped = 0.0
    if min_value < 0.0:
        clipped = float(-np.sum(rho[rho < 0])) * grid.cell_volume
        rho = np.maximum(rho, 0.0)
        if renormalize and mass_in > 0:
            rho *= mass_in / (float(np.sum(rho)) * grid.cell_volume)
    info = StepInfo(iterations=it, residual=rnorm, mass_drift=mass_drift,
                    min_value=min_value, clipped=clipped, method=method)
    return rho.reshape(shape), info


@dataclass
class Trajectory:
    """Densities ``rho^0 .. rho^N`` of the backward Euler scheme with ``h = T/N``."""

    grid: Grid
    T: float
    N: int
    states: np.ndarray        # (N+1, *grid.shape)
    zeta: np.ndarray
    drift: np.ndarray
    steps: list[StepInfo] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    _op: StepOperator | None = field(default=None, repr=False)

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        """Piecewise-constant interpolant: ``rho^0`` at 0, ``rho^{i+1}`` on ``(ih, (i+1)h]``."""
        if t <= 0:
            return self.states[0]
        i = min(int(np.ceil(t / self.h - 1e-12)), self.N)
        return self.states[i]

    @property
    def operator(self) -> StepOperator:
        if self._op is None:
            self._op = StepOperator(self.grid, self.drift)
        return self._op

    def step_records(self) -> list[dict]:
        return [dict(step=i + 1, **s.as_dict()) for i, s in enumerate(self.steps)]


def solve_forward(
    rho0: InitialDensity | np.ndarray,
    zeta: np.ndarray,
    N: int,
    T: float,
    model: ModelFunctions,
    kernel: Kernel,
    tol: float = 1e-11,
    max_iter: int = 50,
) -> Trajectory:
    """March the scheme over ``N`` steps of size ``T/N`` from the projected initial density."""
    if N < 1:
        raise ValueError(f"need N >= 1, got {N}")
    grid = kernel.grid
    if isinstance(rho0, InitialDensity):
        start = project_density(rho0, grid)
    else:
        start = grid.check_field(rho0)
    zeta = grid.check_field(zeta)
    drift = nonlocal_drift(zeta, kernel)
    op = StepOperator(grid, drift)
    h = T / N
    states = np.empty((N + 1,) + grid.shape)
    states[0] = start
    infos = []
    clipped_total = 0.0
    for i in range(N):
        try:
            states[i + 1], info = implicit_step(states[i], op, h, model, tol=tol, max_iter=max_iter)
        except StepFailed as exc:
            raise type(exc)(str(exc), step=i + 1, residual=exc.residual) from exc
        clipped_total += info.clipped
        if clipped_total > CLIP_BUDGET:
            raise StepFailed(f"cumulative clipped mass {clipped_total:.2e} exceeds budget", step=i + 1)
        infos.append(info)

    traj = Trajectory(grid=grid, T=T, N=N, states=states, zeta=zeta, drift=drift, steps=infos, _op=op)
    traj.diagnostics = forward_diagnostics(traj)
    bm = traj.diagnostics["max_boundary_mass"]
    if bm > BOUNDARY_MASS_LIMIT:
        log.debug("boundary mass %.2e > %.0e: enlarge the box", bm, BOUNDARY_MASS_LIMIT)
    return traj


def forward_diagnostics(traj: Trajectory) -> dict:
    """Mass drift, positivity, Newton effort and the discrete energy norms."""
    grid = traj.grid
    masses = np.array([integrate(grid, s) for s in traj.states])
    l2 = np.sqrt(np.sum(traj.states**2, axis=tuple(range(1, grid.d + 1))) * grid.cell_volume)
    grad_energy = 0.0
    for s in traj.states[1:]:
        grad_energy += traj.h * float(np.sum(gradient(grid, s) ** 2) * grid.cell_volume)
    return {
        "max_mass_error": float(np.max(np.abs(masses - masses[0]))),
        "max_step_mass_drift": float(max((abs(s.mass_drift) for s in traj.steps), default=0.0)),
        "min_value": float(min((s.min_value for s in traj.steps), default=traj.states[0].min())),
        "clipped_total": float(sum(s.clipped for s in traj.steps)),
        "max_newton_iterations": int(max((s.iterations for s in traj.steps), default=0)),
        "max_residual": float(max((s.residual for s in traj.steps), default=0.0)),
        "sup_linf": float(np.max(traj.states)),
        "sup_l2": float(np.max(l2)),
        "grad_l2_energy": grad_energy,
        "max_boundary_mass": float(max(boundary_mass(grid, s) for s in traj.states)),
    }


# --------------------------------------------------------------------------
# linearized (sensitivity) recursion


def linearized_matrix(op: StepOperator, rho: np.ndarray, h: float, model: ModelFunctions) -> sp.csc_matrix:
    """``z -> z - h Lap(beta'(rho) z) + h div_up(K (b*)'(rho) z)``; the Newton Jacobian at ``rho``."""
    return op.jacobian(np.asarray(rho, dtype=float).ravel(), h, model)


def perturbation_source(grid: Grid, base_drift: np.ndarray, xi_drift: np.ndarray,
                        rho: np.ndarray, model: ModelFunctions) -> np.ndarray:
    """``div_up(K(xi) b*(rho))`` with donor cells fixed by the base drift ``K(zeta)``."""
    up = upwind_matrix(grid, xi_drift, direction=base_drift)
    return up @ model.b_star(np.asarray(rho, dtype=float).ravel())


@dataclass
class SensitivityTrajectory:
    states: np.ndarray   # (N+1, *grid.shape), states[0] == 0
    direction: np.ndarray


def solve_sensitivity(traj: Trajectory, xi: np.ndarray, kernel: Kernel, model: ModelFunctions) -> SensitivityTrajectory:
    """Derivative of the discrete trajectory with respect to the control in direction ``xi``.

    Solves ``J_{i+1} z^{i+1} = z^i - h div_up(K(xi) b*(rho^{i+1}))`` with
    ``z^0 = 0``; ``J_{i+1}`` is the Newton Jacobian at ``rho^{i+1}``.  Solves
    are direct (sparse LU), so they are exact up to round-off.
    """
    grid = traj.grid
    xi = grid.check_field(xi)
    xi_drift = nonlocal_drift(xi, kernel)
    op = traj.operator
    h = traj.h
    z = np.zeros((traj.N + 1,) + grid.shape)
    for i in range(traj.N):
        rho = traj.states[i + 1].ravel()
        rhs = z[i].ravel() - h * perturbation_source(grid, traj.drift, xi_drift, rho, model)
        J = linearized_matrix(op, rho, h, model)
        try:
            sol = spla.spsolve(J, rhs)
        except RuntimeError as exc:  # singular factorization
            raise StepFailed(f"linear solver breakdown: {exc}", step=i + 1) from exc
        if not np.all(np.isfinite(sol)):
            raise StepFailed("linear solver breakdown (non-finite solution)", step=i + 1)
        z[i + 1] = sol.reshape(grid.shape)
    return SensitivityTrajectory(states=z, direction=xi)
