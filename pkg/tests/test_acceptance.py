"""The twelve acceptance criteria at reference scale (d=1, n=256, L=6, T=0.5, N=64).

Each test records one ``[PASS]``/``[FAIL]`` line that is printed in the
terminal summary, then asserts.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fpcontrol.adjoint import duality_terms, solve_adjoint
from fpcontrol.cli import manifest_signature
from fpcontrol.control import make_kernel, nonlocal_drift
from fpcontrol.fp import StepOperator, implicit_step, solve_forward, solve_sensitivity
from fpcontrol.grid import Grid, integrate
from fpcontrol.model import builtin_model, gaussian_density
from fpcontrol.optimize import (
    ReducedProblem,
    continuation_in_h,
    directional_check,
    evaluate_cost,
    projected_gradient_solve,
    sign_violations,
)
from fpcontrol.particle import bootstrap_density_bound, mc_cost, simulate

from _scenarios import random_density, random_direction, random_interior_control, repeller_scenario

ROOT = Path(__file__).resolve().parents[1]


def record(k, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _l1(g, f):
    return float(np.sum(np.abs(f)) * g.cell_volume)


def interval_control(sc, value=1.0, lo=-0.5, hi=1.0):
    x = sc.grid.coords[0]
    return sc.project(np.where((x >= lo) & (x <= hi), value, 0.0))


def test_criterion_01_mass_conservation():
    sc = repeller_scenario()
    worst, drift = 0.0, 0.0
    for zeta in (interval_control(sc), sc.project(np.full(sc.grid.shape, sc.aset.M0)), sc.zeros()):
        traj = sc.forward(zeta)
        worst = max(worst, max(abs(integrate(sc.grid, s) - 1.0) for s in traj.states))
        drift = max(drift, traj.diagnostics["max_step_mass_drift"])
    record(1, worst <= 1e-10 and drift <= 1e-12,
           f"max |mass-1| = {worst:.2e} (<= 1e-10), max pre-renormalization drift/step = {drift:.2e} (<= 1e-12)")


def test_criterion_02_l1_contraction():
    sc = repeller_scenario()
    g, h = sc.grid, sc.T / sc.N
    rng = np.random.default_rng(2)
    worst = -np.inf
    for _ in range(50):
        zeta = random_interior_control(sc, rng, 0.0, 1.0)
        op = StepOperator(g, nonlocal_drift(zeta, sc.kernel))
        f, q = random_density(g, rng), random_density(g, rng)
        sf, _ = implicit_step(f, op, h, sc.model)
        sq, _ = implicit_step(q, op, h, sc.model)
        worst = max(worst, _l1(g, sf - sq) - _l1(g, f - q))
    record(2, worst <= 1e-10, f"50 pairs, max(||Sf-Sg||_1 - ||f-g||_1) = {worst:.2e} (<= 1e-10)")


def test_criterion_03_heat_oracle():
    errors = []
    for n, N in [(256, 64), (512, 128)]:
        g = Grid(1, 6.0, n)
        traj = solve_forward(gaussian_density([0.0], 0.5), np.zeros(g.shape), N, 0.5, builtin_model("linear"),
                             make_kernel(1.0, g))
        var = 0.25 + 2 * 0.5
        exact = np.exp(-g.coords[0] ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
        errors.append(_l1(g, traj.final - exact))
    ratio = errors[0] / errors[1]
    record(3, errors[0] <= 2e-2 and 1.7 <= ratio <= 2.3,
           f"L1 error = {errors[0]:.3e} (<= 2e-2), halving ratio = {ratio:.3f} (in [1.7, 2.3])")


def test_criterion_04_self_convergence():
    sc = repeller_scenario()
    zeta = interval_control(sc)
    finals = [sc.forward(zeta, N).final for N in (32, 64, 128, 256)]
    diffs = [_l1(sc.grid, a - b) for a, b in zip(finals, finals[1:])]
    ok = all(b < a for a, b in zip(diffs, diffs[1:]))
    record(4, ok, "||rho_h(T) - rho_h/2(T)||_1 for N=32..256: " + ", ".join(f"{d:.3e}" for d in diffs))


def test_criterion_05_sensitivity():
    sc = repeller_scenario()
    rng = np.random.default_rng(5)
    zeta = random_interior_control(sc, rng)
    xi = random_direction(sc, rng)
    z = solve_sensitivity(sc.forward(zeta), xi, sc.kernel, sc.model).states
    errs = []
    for eps in (1e-2, 1e-3, 1e-4, 1e-5):
        fd = (sc.forward(zeta + eps * xi).states - sc.forward(zeta - eps * xi).states) / (2 * eps)
        errs.append(float(np.linalg.norm(fd - z) / np.linalg.norm(fd)))
    record(5, min(errs) <= 1e-3, "relative L2 over eps sweep: " + ", ".join(f"{e:.2e}" for e in errs)
           + " (plateau <= 1e-3)")


def test_criterion_06_duality():
    sc = repeller_scenario()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(5):
        zeta = random_interior_control(sc, rng)
        xi = random_direction(sc, rng)
        traj = sc.forward(zeta)
        adj = solve_adjoint(traj, sc.cost, sc.model)
        z = solve_sensitivity(traj, xi, sc.kernel, sc.model).states
        lhs, rhs = duality_terms(traj, adj, z, xi, sc.kernel, sc.model)
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    record(6, worst <= 1e-6, f"5 random (zeta, xi), max |LHS-RHS|/|LHS| = {worst:.2e} (<= 1e-6)")


def test_criterion_07_gradient_check():
    sc = repeller_scenario(c_Q=0.05)
    rng = np.random.default_rng(7)
    problem = ReducedProblem(sc)
    zeta = random_interior_control(sc, rng)
    errs = [directional_check(problem, zeta, random_direction(sc, rng))["best_rel_error"] for _ in range(5)]
    record(7, max(errs) <= 1e-3, "5 directions, plateau relative errors: " + ", ".join(f"{e:.1e}" for e in errs)
           + " (<= 1e-3)")


@pytest.fixture(scope="module")
def repeller_solution():
    sc = repeller_scenario()
    problem = ReducedProblem(sc)
    return sc, problem, problem.cost(sc.zeros()), projected_gradient_solve(problem, rtol_resid=1e-5)


def test_criterion_08_descent_and_optimality(repeller_solution):
    _, _, baseline, rep = repeller_solution
    monotone = all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))
    ratio = rep.optimality_residual / rep.initial_residual
    ok = monotone and rep.costs[-1] < baseline and ratio <= 1e-4
    record(8, ok, f"{rep.iterates} iterations ({rep.status}), costs non-increasing: {monotone}, "
           f"final cost {rep.costs[-1]:.5f} < baseline {baseline:.5f}, residual ratio {ratio:.1e} (<= 1e-4)")


def test_criterion_09_bang_bang(repeller_solution):
    sc, _, _, rep = repeller_solution
    bad, cells = sign_violations(rep.final_control, rep.final_gradient, sc.aset, sc.grid)
    record(9, bad <= 0.01 * cells, f"sign violators {bad} of {cells} support cells (<= 1%)")


def test_criterion_10_continuation():
    sc = repeller_scenario(c_Q=0.05)
    rep = continuation_in_h(sc, 32, 3, penalty_weight=0.0, rtol_resid=1e-6)
    levels = rep.h_levels
    changes = [lv["control_change_l2"] for lv in levels[1:]]
    deltas = [abs(b["cost_unpenalized"] - a["cost_unpenalized"]) for a, b in zip(levels, levels[1:])]
    ok = changes[1] < changes[0] and deltas[1] < deltas[0]
    record(10, ok, "N=32/64/128, control changes " + " > ".join(f"{c:.2e}" for c in changes)
           + ", cost deltas " + " > ".join(f"{d:.2e}" for d in deltas))


def test_criterion_11_particles_match_pde():
    sc = repeller_scenario()
    zeta = interval_control(sc)
    traj = sc.forward(zeta)
    pde = evaluate_cost(traj, zeta, sc.cost).total
    fine = repeller_scenario(n=512, N=128)
    zeta_fine = interval_control(fine)
    pde_fine = evaluate_cost(fine.forward(zeta_fine), zeta_fine, fine.cost).total
    allowance = 2 * abs(pde - pde_fine)
    ens = simulate(sc.rho0, zeta, sc.kernel, sc.model, "frozen", traj, count=100_000, steps=64, seed=11)
    est, se = mc_cost(ens, sc.cost, zeta)
    boot = bootstrap_density_bound(ens, traj.final, replicates=10, seed=11)
    ok = abs(est - pde) <= 3 * se + allowance and boot["passed"]
    record(11, ok, f"MC {est:.5f} +/- {se:.5f} vs PDE {pde:.5f}: |diff| {abs(est - pde):.2e} <= "
           f"{3 * se + allowance:.2e} (3 stderr + allowance {allowance:.2e}); "
           f"KDE L1 {boot['distance']:.3e} <= bootstrap bound {boot['bound']:.3e}")


def test_criterion_12_cli_determinism(tmp_path):
    manifests = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        proc = subprocess.run([sys.executable, "-m", "fpcontrol", "run", str(ROOT / "configs" / "reference.json"),
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stdout + proc.stderr
        manifests.append(json.loads((out / "manifest.json").read_text()))
    same = manifest_signature(manifests[0]) == manifest_signature(manifests[1])
    record(12, same, f"two CLI runs of the reference config: manifests identical excluding runtime: {same} "
           f"({len(manifests[0]['checks'])} checks, {len(manifests[0]['artifacts'])} artifacts)")
