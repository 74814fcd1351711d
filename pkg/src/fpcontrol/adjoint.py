"""Backward adjoint recursion for the discrete cost.

The adjoint is the exact transpose of the linearized forward step:

    J_{i+1}^T p^i = p^{i+1} - Gt^{i+1},   i = N-1, ..., 0,   p^N = -G_T,

where ``J_{i+1} = I - h Lap diag(beta'(rho^{i+1})) + h Up diag((b*)'(rho^{i+1}))``.
Written out, ``J^T p = p - h beta' Lap p - h (b*)' (K . grad_up p)`` with the
gradient taken on the downwind face, which is the discrete form of the
backward equation with terminal value ``-G_T``.  Because it is an exact
transpose, the duality identity between sensitivities and adjoints holds to
round-off and the resulting gradient is exact for the discrete cost.

``literal=True`` instead discretizes the backward equation directly
(centered gradient, non-conservative form); useful only for comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .control import Kernel, nonlocal_drift
from .errors import StepFailed
from .fp import Trajectory, linearized_matrix
from .grid import (
    Grid,
    divergence_upwind,
    face_average,
    face_gradient,
    gradient,
    laplacian_matrix,
    laplacian_noflux,
    upwind_cells,
)
from .model import CostSpec, ModelFunctions

__all__ = [
    "AdjointTrajectory",
    "discretize_running_cost",
    "solve_adjoint",
    "apply_adjoint_operator",
    "apply_linearized_operator",
    "duality_terms",
]


@dataclass
class AdjointTrajectory:
    states: np.ndarray    # (N+1, *grid.shape); states[N] = -G_T
    G_tilde: np.ndarray   # (N, *grid.shape); G_tilde[i-1] is the running cost of step i
    G_T: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def discretize_running_cost(cost: CostSpec, h: float, N: int, grid: Grid) -> np.ndarray:
    """Midpoint rule for ``Gt^i(x) = int_{(i-1)h}^{ih} G(t, x) dt``, ``i = 1..N``."""
    x = grid.coords
    out = np.empty((N,) + grid.shape)
    if not cost.time_dependent:
        out[:] = h * np.asarray(cost.G(0.0, x), dtype=float)
        return out
    for i in range(1, N + 1):
        out[i - 1] = h * np.asarray(cost.G((i - 0.5) * h, x), dtype=float)
    return out


def _literal_matrix(grid: Grid, drift: np.ndarray, rho: np.ndarray, h: float, model: ModelFunctions):
    # p - h beta'(rho) Lap p - h (b*)'(rho) K . grad_c p, centered differences
    n = grid.size
    lap = laplacian_matrix(grid)
    grad_terms = sp.csr_matrix((n, n))
    for k in range(grid.d):
        d1 = sp.diags([-0.5, 0.5], [-1, 1], shape=(grid.n, grid.n), format="lil")
        d1[0, 0], d1[0, 1] = -1.0, 1.0
        d1[-1, -2], d1[-1, -1] = -1.0, 1.0
        mats = [sp.identity(grid.n)] * grid.d
        mats[k] = d1.tocsr() / grid.dx
        Dk = mats[0]
        for m in mats[1:]:
            Dk = sp.kron(Dk, m)
        grad_terms = grad_terms + sp.diags(drift[k].ravel()) @ Dk
    bp = model.beta_prime(rho)
    bsp = model.b_star_prime(rho)
    return (sp.identity(n) - h * sp.diags(bp) @ lap - h * sp.diags(bsp) @ grad_terms).tocsc()


def solve_adjoint(
    traj: Trajectory,
    cost: CostSpec,
    model: ModelFunctions,
    literal: bool = False,
) -> AdjointTrajectory:
    """Run the adjoint recursion backward from ``p^N = -G_T``.

    Each step is a direct sparse solve with the transposed step Jacobian, so
    the residual is at round-off level.
    """
    grid = traj.grid
    h, N = traj.h, traj.N
    G_T = np.asarray(cost.G_T(grid.coords), dtype=float)
    Gt = discretize_running_cost(cost, h, N, grid)
    p = np.empty((N + 1,) + grid.shape)
    p[N] = -G_T
    op = traj.operator
    residuals = []
    for i in range(N - 1, -1, -1):
        rho = traj.states[i + 1].ravel()
        if literal:
            A = _literal_matrix(grid, traj.drift, rho, h, model)
        else:
            A = linearized_matrix(op, rho, h, model).T.tocsc()
        rhs = (p[i + 1] - Gt[i]).ravel()
        try:
            sol = spla.spsolve(A, rhs)
        except RuntimeError as exc:
            raise StepFailed(f"linear solver breakdown: {exc}; reduce h", step=i) from exc
        if not np.all(np.isfinite(sol)):
            raise StepFailed("adjoint solve diverged; reduce h", step=i)
        residuals.append(float(np.linalg.norm(A @ sol - rhs) * np.sqrt(grid.cell_volume)))
        p[i] = sol.reshape(grid.shape)
    adj = AdjointTrajectory(states=p, G_tilde=Gt, G_T=G_T)
    adj.diagnostics = adjoint_diagnostics(grid, p, h)
    adj.diagnostics["max_residual_l2"] = max(residuals, default=0.0)
    return adj


def adjoint_diagnostics(grid: Grid, p: np.ndarray, h: float) -> dict:
    vol = grid.cell_volume
    grad_norms = [float(np.sqrt(np.sum(gradient(grid, s) ** 2) * vol)) for s in p]
    lap_energy = h * sum(float(np.sum(laplacian_noflux(grid, s) ** 2) * vol) for s in p[:-1])
    return {
        "sup_grad_l2": max(grad_norms),
        "lap_l2_energy": lap_energy,
        "max_value": float(np.max(p)),
        "sup_l2": float(max(np.sqrt(np.sum(s**2) * vol) for s in p)),
    }


def apply_linearized_operator(grid: Grid, drift, rho, z, h, model) -> np.ndarray:
    """Matrix-free ``J z`` (independent of the assembled sparse matrices)."""
    return (z - h * laplacian_noflux(grid, model.beta_prime(rho) * z)
            + h * divergence_upwind(grid, drift, model.b_star_prime(rho) * z))


def apply_adjoint_operator(grid: Grid, drift, rho, p, h, model) -> np.ndarray:
    """Matrix-free ``J^T p``: ``p - h beta' Lap p - h (b*)' sum_faces a grad_face p`` gathered at donor cells."""
    gather = np.zeros(grid.size)
    for k in range(grid.d):
        a = face_average(grid, drift, k)
        donor = upwind_cells(grid, a, k)
        gather += np.bincount(donor, weights=a * face_gradient(grid, p, k), minlength=grid.size)
    gather = gather.reshape(grid.shape)
    return p - h * model.beta_prime(rho) * laplacian_noflux(grid, p) - h * model.b_star_prime(rho) * gather


def duality_terms(traj: Trajectory, adj: AdjointTrajectory, sens_states: np.ndarray, xi: np.ndarray,
                  kernel: Kernel, model: ModelFunctions) -> tuple[float, float]:
    """Both sides of the summation-by-parts identity.

    ``lhs = sum_i <Gt^i, z^i> + <G_T, z^N>`` from the sensitivities;
    ``rhs = -sum_i h <b*(rho^i) K(xi), grad p^{i-1}>`` on the faces, with
    donor cells of ``K(zeta)``.
    """
    grid = traj.grid
    vol = grid.cell_volume
    lhs = sum(float(np.sum(adj.G_tilde[i - 1] * sens_states[i])) for i in range(1, traj.N + 1)) * vol
    lhs += float(np.sum(adj.G_T * sens_states[traj.N])) * vol
    xi_drift = nonlocal_drift(xi, kernel)
    rhs = 0.0
    for i in range(1, traj.N + 1):
        bs = model.b_star(traj.states[i]).ravel()
        for k in range(grid.d):
            a_base = face_average(grid, traj.drift, k)
            donor = upwind_cells(grid, a_base, k)
            flux = face_average(grid, xi_drift, k) * bs[donor]
            rhs -= traj.h * float(np.sum(flux * face_gradient(grid, adj.states[i - 1], k))) * vol
    return lhs, rhs

