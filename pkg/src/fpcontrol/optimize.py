"""Discrete cost, its adjoint gradient, projected gradient descent and h-continuation.

The discrete cost of a control ``zeta`` is

    I_h(zeta) = sum_{i=1}^N <Gt^i, rho^i> + <G_T, rho^N> + int Q(x, zeta)
                + (w/2) int |zeta - anchor|^2

and its derivative in direction ``xi`` equals ``<xi, D>`` with

    D(x) = sum_x' grad G_R(x' - x) . F(x') dx'^d + Q_z(x, zeta) + w (zeta - anchor),
    F    = sum_i h b*(rho^i) grad p^{i-1}     (assembled on faces, donor cells of K(zeta)).

First-order optimality over the admissible box says ``D >= 0`` where
``zeta = 0``, ``D <= 0`` where ``zeta = M0`` and ``D = 0`` in between.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import AdjointTrajectory, discretize_running_cost, solve_adjoint
from .control import AdmissibleSet, Kernel, kernel_correlate, project_admissible
from .fp import Trajectory, solve_forward
from .grid import Grid, face_average, face_gradient, upwind_cells
from .model import CostSpec, InitialDensity, ModelFunctions

__all__ = [
    "Scenario",
    "CostBreakdown",
    "GradientField",
    "OptimizerReport",
    "ReducedProblem",
    "evaluate_cost",
    "gradient_field",
    "optimality_residual",
    "bang_bang_extract",
    "sign_violations",
    "projected_gradient_solve",
    "continuation_in_h",
    "directional_check",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to evaluate the discrete control problem."""

    grid: Grid
    model: ModelFunctions
    kernel: Kernel
    aset: AdmissibleSet
    cost: CostSpec
    rho0: InitialDensity
    T: float
    N: int
    newton_tol: float = 1e-11

    def forward(self, zeta: np.ndarray, N: int | None = None) -> Trajectory:
        return solve_forward(self.rho0, zeta, N or self.N, self.T, self.model, self.kernel, tol=self.newton_tol)

    def with_steps(self, N: int) -> "Scenario":
        return replace(self, N=N)

    def project(self, f: np.ndarray) -> np.ndarray:
        return project_admissible(f, self.aset, self.grid)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.grid.shape)


@dataclass
class CostBreakdown:
    running: float
    terminal: float
    control: float
    penalty: float

    @property
    def total(self) -> float:
        return self.running + self.terminal + self.control + self.penalty

    @property
    def unpenalized(self) -> float:
        return self.running + self.terminal + self.control

    def as_dict(self):
        return {"running": self.running, "terminal": self.terminal, "control": self.control,
                "penalty": self.penalty, "total": self.total}


def evaluate_cost(
    traj: Trajectory,
    zeta: np.ndarray,
    cost: CostSpec,
    anchor: np.ndarray | None = None,
    penalty_weight: float = 0.0,
) -> CostBreakdown:
    """Discrete cost with right-endpoint states in time (``rho^i`` on ``((i-1)h, ih]``)."""
    grid = traj.grid
    vol = grid.cell_volume
    Gt = discretize_running_cost(cost, traj.h, traj.N, grid)
    running = float(np.sum(Gt * traj.states[1:])) * vol
    terminal = float(np.sum(np.asarray(cost.G_T(grid.coords)) * traj.final)) * vol
    control = float(np.sum(np.asarray(cost.Q(grid.coords, zeta)))) * vol
    penalty = 0.0
    if anchor is not None and penalty_weight:
        penalty = 0.5 * penalty_weight * float(np.sum((zeta - anchor) ** 2)) * vol
    return CostBreakdown(running, terminal, control, penalty)


@dataclass
class GradientField:
    """``D`` split into its coupling, control-cost and penalty parts."""

    D: np.ndarray
    coupling: np.ndarray
    control: np.ndarray
    penalty: np.ndarray


def coupling_flux(traj: Trajectory, adj: AdjointTrajectory, model: ModelFunctions) -> list[np.ndarray]:
    """Face values of ``sum_i h b*(rho^i) grad p^{i-1}`` per axis (donor cells of ``K(zeta)``)."""
    grid = traj.grid
    out = []
    for k in range(grid.d):
        donor = upwind_cells(grid, face_average(grid, traj.drift, k), k)
        acc = np.zeros(donor.size)
        for i in range(1, traj.N + 1):
            acc += model.b_star(traj.states[i]).ravel()[donor] * face_gradient(grid, adj.states[i - 1], k)
        out.append(traj.h * acc)
    return out


def gradient_field(
    traj: Trajectory,
    adj: AdjointTrajectory,
    zeta: np.ndarray,
    kernel: Kernel,
    cost: CostSpec,
    model: ModelFunctions,
    anchor: np.ndarray | None = None,
    penalty_weight: float = 0.0,
) -> GradientField:
    """Assemble ``D`` so that the directional derivative of the cost is ``<xi, D>``."""
    grid = traj.grid
    faces = coupling_flux(traj, adj, model)
    # transpose of the face averaging: each face hands half its value to both cells
    c = np.zeros((grid.d, grid.size))
    for k, phi in enumerate(faces):
        left, right = grid.faces(k)
        c[k] += 0.5 * (np.bincount(left, phi, minlength=grid.size) + np.bincount(right, phi, minlength=grid.size))
    c = c.reshape((grid.d,) + grid.shape)
    # d(running + terminal) = -<K(xi), c> = <xi, kernel_correlate(c)>
    coupling = kernel_correlate(c, kernel)
    control = np.asarray(cost.Q_z(grid.coords, zeta), dtype=float) * np.ones(grid.shape)
    if anchor is not None and penalty_weight:
        penalty = penalty_weight * (zeta - anchor)
    else:
        penalty = np.zeros(grid.shape)
    return GradientField(D=coupling + control + penalty, coupling=coupling, control=control, penalty=penalty)


def optimality_residual(zeta: np.ndarray, D: np.ndarray, aset: AdmissibleSet, grid: Grid,
                        kappa: float = 1e-6) -> float:
    """Integrated violation of the sign conditions over the control support."""
    return float(np.sum(_cell_residual(zeta, D, aset, grid, kappa))) * grid.cell_volume


def _cell_residual(zeta, D, aset, grid, kappa=1e-6):
    band = kappa * aset.M0
    lower = zeta <= band
    upper = zeta >= aset.M0 - band
    r = np.where(lower, np.maximum(0.0, -D), np.where(upper, np.maximum(0.0, D), np.abs(D)))
    return np.where(aset.mask(grid), r, 0.0)


def sign_violations(zeta: np.ndarray, D: np.ndarray, aset: AdmissibleSet, grid: Grid,
                    d_tol: float = 1e-6, kappa: float = 1e-6) -> tuple[int, int]:
    """Cells of the support where ``zeta`` is strictly interior while ``|D| > d_tol``.

    Returns ``(violators, support_cells)``.
    """
    mask = aset.mask(grid)
    band = kappa * aset.M0
    interior = (zeta > band) & (zeta < aset.M0 - band)
    return int(np.sum(mask & interior & (np.abs(D) > d_tol))), int(np.sum(mask))


def bang_bang_extract(D: np.ndarray, aset: AdmissibleSet, grid: Grid, tie_tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Two-valued control dictated by the sign of ``D``; ties get ``M0/2``.

    Returns the control and the number of tied cells inside the support.
    """
    zeta = np.where(D > tie_tol, 0.0, np.where(D < -tie_tol, aset.M0, 0.5 * aset.M0))
    mask = aset.mask(grid)
    ties = int(np.sum(mask & (np.abs(D) <= tie_tol)))
    return np.where(mask, zeta, 0.0), ties


class ReducedProblem:
    """``zeta -> I_h(zeta)`` and its gradient for one scenario and step count."""

    def __init__(self, scenario: Scenario, N: int | None = None, anchor: np.ndarray | None = None,
                 penalty_weight: float = 0.0):
        self.scenario = scenario.with_steps(N) if N else scenario
        self.anchor = anchor
        self.penalty_weight = float(penalty_weight)
        self.forward_solves = 0
        self.adjoint_solves = 0

    @property
    def grid(self) -> Grid:
        return self.scenario.grid

    def evaluate(self, zeta: np.ndarray) -> tuple[CostBreakdown, Trajectory]:
        traj = self.scenario.forward(zeta)
        self.forward_solves += 1
        return evaluate_cost(traj, zeta, self.scenario.cost, self.anchor, self.penalty_weight), traj

    def cost(self, zeta: np.ndarray) -> float:
        return self.evaluate(zeta)[0].total

    def gradient(self, zeta: np.ndarray, traj: Trajectory | None = None) -> GradientField:
        sc = self.scenario
        if traj is None:
            traj = sc.forward(zeta)
            self.forward_solves += 1
        adj = solve_adjoint(traj, sc.cost, sc.model)
        self.adjoint_solves += 1
        return gradient_field(traj, adj, zeta, sc.kernel, sc.cost, sc.model, self.anchor, self.penalty_weight)


def directional_check(problem: ReducedProblem, zeta: np.ndarray, xi: np.ndarray,
                      eps_list=(1e-2, 1e-3, 1e-4, 1e-5)) -> dict:
    """Central finite differences of the cost against ``<xi, D>`` over an eps sweep."""
    vol = problem.grid.cell_volume
    D = problem.gradient(zeta).D
    adj = float(np.sum(xi * D)) * vol
    rows = []
    for eps in eps_list:
        fd = (problem.cost(zeta + eps * xi) - problem.cost(zeta - eps * xi)) / (2 * eps)
        rows.append({"eps": eps, "fd": fd, "adjoint": adj, "rel_error": abs(fd - adj) / max(abs(adj), 1e-300)})
    best = min(rows, key=lambda r: r["rel_error"])
    return {"adjoint": adj, "sweep": rows, "best_rel_error": best["rel_error"], "best_eps": best["eps"]}


@dataclass
class OptimizerReport:
    iterates: int
    costs: list[float]
    residuals: list[float]
    final_control: np.ndarray
    final_gradient: np.ndarray
    optimality_residual: float
    bang_bang_fraction: float
    status: str
    breakdown: CostBreakdown | None = None
    h_levels: list[dict] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)

    @property
    def initial_residual(self) -> float:
        return self.residuals[0]

    def as_dict(self) -> dict:
        return {
            "iterates": self.iterates,
            "status": self.status,
            "costs": self.costs,
            "residuals": self.residuals,
            "steps": self.steps,
            "optimality_residual": self.optimality_residual,
            "bang_bang_fraction": self.bang_bang_fraction,
            "final_cost": self.breakdown.as_dict() if self.breakdown else None,
            "h_levels": self.h_levels,
        }


def _bang_bang_fraction(zeta, aset, grid, kappa=1e-6):
    mask = aset.mask(grid)
    band = kappa * aset.M0
    at_bound = (zeta <= band) | (zeta >= aset.M0 - band)
    return float(np.sum(at_bound & mask) / max(np.sum(mask), 1))


def projected_gradient_solve(
    problem: ReducedProblem,
    zeta0: np.ndarray | None = None,
    step0: float | None = None,
    max_iters: int = 200,
    tol_resid: float = 0.0,
    rtol_resid: float | None = None,
    armijo: float = 1e-4,
    backtrack: float = 0.5,
    growth: float = 1.5,
    max_backtracks: int = 30,
) -> OptimizerReport:
    """Projected gradient with Armijo backtracking on the true discrete cost.

    ``zeta0`` defaults to ``M0/2`` on the support.  ``step0=None`` picks a
    step that moves the largest-gradient cell by half the admissible range.
    Stops when the optimality residual drops below
    ``max(tol_resid, rtol_resid * initial_residual)``.
    """
    sc = problem.scenario
    grid, aset = sc.grid, sc.aset
    vol = grid.cell_volume
    if zeta0 is None:
        zeta0 = np.full(grid.shape, 0.5 * aset.M0)
    zeta = sc.project(zeta0)
    cb, traj = problem.evaluate(zeta)
    grad = problem.gradient(zeta, traj)
    res = optimality_residual(zeta, grad.D, aset, grid)
    costs, residuals, steps = [cb.total], [res], []
    target = tol_resid if rtol_resid is None else max(tol_resid, rtol_resid * res)

    dmax = float(np.max(np.abs(np.where(aset.mask(grid), grad.D, 0.0))))
    if step0 is None:
        step0 = 0.5 * aset.M0 / dmax if dmax > 0 else 1.0
    if step0 <= 0:
        raise ValueError("step0 must be positive")
    s = step0
    status = "converged" if res <= target else "max_iters"
    it = 0
    while res > target and it < max_iters:
        accepted = False
        for _ in range(max_backtracks + 1):
            trial = sc.project(zeta - s * grad.D)
            pred = float(np.sum(grad.D * (trial - zeta))) * vol
            cb_t, traj_t = problem.evaluate(trial)
            if cb_t.total <= cb.total + armijo * pred:
                accepted = True
                break
            s *= backtrack
            if s < step0 * 2.0**-30:
                break
        if not accepted:
            status = "stalled"
            break
        it += 1
        steps.append(s)
        zeta, cb, traj = trial, cb_t, traj_t
        grad = problem.gradient(zeta, traj)
        res = optimality_residual(zeta, grad.D, aset, grid)
        costs.append(cb.total)
        residuals.append(res)
        s *= growth
        log.debug("iter %d cost %.12g residual %.3e step %.3e", it, cb.total, res, s)
    if res <= target:
        status = "converged"
    return OptimizerReport(
        iterates=it,
        costs=costs,
        residuals=residuals,
        final_control=zeta,
        final_gradient=grad.D,
        optimality_residual=res,
        bang_bang_fraction=_bang_bang_fraction(zeta, aset, grid),
        status=status,
        breakdown=cb,
        steps=steps,
    )


def continuation_in_h(
    scenario: Scenario,
    N0: int,
    levels: int,
    zeta0: np.ndarray | None = None,
    penalty_weight: float = 0.0,
    **solver_kwargs,
) -> OptimizerReport:
    """Solve at ``N0, 2 N0, 4 N0, ...`` warm-starting from the previous level.

    From the second level on, the previous control is the penalty anchor with
    weight ``penalty_weight``.  ``h_levels`` records per-level costs and the
    L2 distance to the previous level's control.
    """
    if levels < 1:
        raise ValueError("need at least one level")
    grid = scenario.grid
    prev = None
    report = None
    h_levels = []
    total_iters = 0
    for level in range(levels):
        N = N0 * 2**level
        problem = ReducedProblem(scenario, N=N, anchor=prev, penalty_weight=penalty_weight if prev is not None else 0.0)
        start = zeta0 if prev is None else prev
        report = projected_gradient_solve(problem, zeta0=start, **solver_kwargs)
        total_iters += report.iterates
        zeta = report.final_control
        entry = {
            "N": N,
            "h": scenario.T / N,
            "cost": report.breakdown.total,
            "cost_unpenalized": report.breakdown.unpenalized,
            "iterates": report.iterates,
            "status": report.status,
            "optimality_residual": report.optimality_residual,
            "control_change_l2": None if prev is None else float(np.sqrt(np.sum((zeta - prev) ** 2) * grid.cell_volume)),
        }
        h_levels.append(entry)
        prev = zeta
    report.h_levels = h_levels
    report.iterates = total_iters
    return report
