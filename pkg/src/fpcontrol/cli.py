"""Scenario runner: ``fpcontrol run | gradcheck | compare | config-reference``.

Exit codes: 0 when every requested check passes, 1 when a check fails,
2 for an invalid config, 3 for a numerical failure (the stage is named).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .adjoint import duality_terms, solve_adjoint
from .config import STAGES, ConfigError, build_scenario, config_hash, config_reference, load_config
from .errors import ConfigurationError, FPControlError, GridMismatch
from .fp import solve_sensitivity
from .grid import Grid, read_field_csv, write_field_csv
from .model import validate_hypotheses
from .optimize import (
    ReducedProblem,
    bang_bang_extract,
    continuation_in_h,
    directional_check,
    evaluate_cost,
    projected_gradient_solve,
    sign_violations,
)
from .particle import bootstrap_density_bound, mc_cost, simulate

__all__ = ["main", "run_scenario", "compare_runs", "manifest_signature"]

log = logging.getLogger("fpcontrol")

MANIFEST_VERSION = 1
VOLATILE_KEYS = ("runtime",)
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class StageFailure(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        super().__init__(f"stage {stage!r} failed: {exc}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"fpcontrol": pkg, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _l2(grid: Grid, f) -> float:
    return float(np.sqrt(np.sum(np.asarray(f) ** 2) * grid.cell_volume))


class Runner:
    def __init__(self, cfg: dict, out: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out
        self.threads = max(1, int(threads))
        self.built = build_scenario(cfg)
        self.sc = self.built.scenario
        self.grid = self.sc.grid
        self.checks: list[dict] = []
        self.artifacts: dict[str, dict] = {}
        self.warnings: list[str] = []
        self.results: dict = {}
        self.timings: dict[str, float] = {}
        self.rng = np.random.default_rng([cfg.get("seed", 0), 2024])

    # bookkeeping
    def check(self, stage, name, passed, value=None, threshold=None):
        self.checks.append({"stage": stage, "name": name, "passed": bool(passed),
                            "value": _jsonable(value), "threshold": threshold})

    def write_json(self, name, data):
        path = self.out / f"{name}.json"
        path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
        self._register(name, path)

    def write_field(self, name, values, column="value"):
        path = self.out / f"{name}.csv"
        write_field_csv(path, self.grid, values, column)
        self._register(name, path)

    def _register(self, name, path: Path):
        self.artifacts[name] = {"path": path.name, "sha256": _sha256(path)}

    # shared intermediate results
    def control(self):
        return self.results.get("optimized_control", self.built.control)

    def trajectory(self, zeta=None):
        zeta = self.built.control if zeta is None else zeta
        key = ("traj", hash(zeta.tobytes()))
        if key not in self.results:
            self.results[key] = self.sc.forward(zeta)
        return self.results[key]

    def random_interior_control(self):
        M0 = self.sc.aset.M0
        return self.sc.project(self.rng.uniform(0.1 * M0, 0.9 * M0, self.grid.shape))

    def random_direction(self):
        return np.where(self.sc.aset.mask(self.grid), self.rng.standard_normal(self.grid.shape), 0.0)

    # stages
    def stage_validate(self):
        sc = self.sc
        report = validate_hypotheses(sc.model, sc.cost, sc.rho0, grid=self.grid, z_max=max(sc.aset.M0, 1e-300),
                                     t_max=sc.T)
        for c in report.checks:
            self.check("validate", c.name, c.passed, c.worst)
        self.write_json("validation", report.as_dict())

    def stage_forward(self):
        zeta = self.built.control
        traj = self.trajectory(zeta)
        diag = traj.diagnostics
        cb = evaluate_cost(traj, zeta, self.sc.cost)
        self.check("forward", "mass error <= 1e-10", diag["max_mass_error"] <= 1e-10, diag["max_mass_error"], 1e-10)
        self.check("forward", "step mass drift <= 1e-12", diag["max_step_mass_drift"] <= 1e-12,
                   diag["max_step_mass_drift"], 1e-12)
        self.check("forward", "density >= 0", diag["min_value"] >= 0.0 or diag["clipped_total"] <= 1e-8,
                   diag["min_value"])
        if diag["max_boundary_mass"] > 1e-8:
            self.warnings.append(f"boundary mass {diag['max_boundary_mass']:.2e} > 1e-8: consider a larger box")
        self.write_field("control_input", zeta, "zeta")
        self.write_field("density_final", traj.final, "rho")
        self.write_json("forward", {"diagnostics": diag, "cost": cb.as_dict(), "steps": traj.step_records()})

    def stage_adjoint(self):
        zeta = self.built.control
        traj = self.trajectory(zeta)
        adj = solve_adjoint(traj, self.sc.cost, self.sc.model)
        tol = self.cfg["gradcheck"]["duality_tolerance"]
        rows = []
        for _ in range(self.cfg["gradcheck"]["directions"]):
            xi = self.random_direction()
            sens = solve_sensitivity(traj, xi, self.sc.kernel, self.sc.model)
            lhs, rhs = duality_terms(traj, adj, sens.states, xi, self.sc.kernel, self.sc.model)
            rows.append({"lhs": lhs, "rhs": rhs, "rel_error": abs(lhs - rhs) / max(abs(lhs), 1e-300)})
        worst = max(r["rel_error"] for r in rows)
        self.check("adjoint", f"sensitivity/adjoint duality <= {tol:g}", worst <= tol, worst, tol)
        self.check("adjoint", "adjoint <= 0", adj.diagnostics["max_value"] <= 1e-12, adj.diagnostics["max_value"])
        problem = ReducedProblem(self.sc)
        D = problem.gradient(zeta, traj).D
        self.write_field("adjoint_initial", adj.states[0], "p")
        self.write_field("gradient_input", D, "D")
        self.write_json("adjoint", {"diagnostics": adj.diagnostics, "duality": rows})

    def stage_gradcheck(self):
        g = self.cfg["gradcheck"]
        problem = ReducedProblem(self.sc)
        rows = []
        for _ in range(g["directions"]):
            zeta, xi = self.random_interior_control(), self.random_direction()
            rows.append(directional_check(problem, zeta, xi, tuple(g["eps"])))
        worst = max(r["best_rel_error"] for r in rows)
        self.check("gradcheck", f"adjoint gradient vs central differences <= {g['tolerance']:g}",
                   worst <= g["tolerance"], worst, g["tolerance"])
        # state sensitivity against perturbed forward solves
        zeta, xi = self.random_interior_control(), self.random_direction()
        traj = self.sc.forward(zeta)
        z = solve_sensitivity(traj, xi, self.sc.kernel, self.sc.model).states
        sweep = []
        for eps in g["eps"]:
            fd = (self.sc.forward(zeta + eps * xi).states - self.sc.forward(zeta - eps * xi).states) / (2 * eps)
            sweep.append({"eps": eps, "rel_l2": float(np.linalg.norm(fd - z) / max(np.linalg.norm(fd), 1e-300))})
        best = min(s["rel_l2"] for s in sweep)
        self.check("gradcheck", f"sensitivity vs perturbed states <= {g['tolerance']:g}", best <= g["tolerance"],
                   best, g["tolerance"])
        self.write_json("gradcheck", {"gradient": rows, "sensitivity": sweep})

    def stage_optimize(self):
        o = self.cfg["optimizer"]
        sc = self.sc
        problem = ReducedProblem(sc, penalty_weight=0.0)
        baseline = problem.cost(sc.zeros())
        start = None if o["start"] == "midpoint" else self.built.control
        rep = projected_gradient_solve(problem, zeta0=start, step0=o["step0"], max_iters=o["max_iters"],
                                       tol_resid=o["tol_resid"], rtol_resid=o["rtol_resid"])
        costs = rep.costs
        monotone = all(b <= a for a, b in zip(costs, costs[1:]))
        self.check("optimize", "costs non-increasing", monotone, None)
        self.check("optimize", "final cost < zero-control cost", costs[-1] < baseline, costs[-1], baseline)
        ratio = rep.optimality_residual / rep.initial_residual if rep.initial_residual > 0 else 0.0
        self.check("optimize", f"optimality residual <= {o['residual_reduction']:g} x initial",
                   ratio <= o["residual_reduction"], ratio, o["residual_reduction"])
        extra = {}
        if self.cfg["cost"].get("c_Q", 0.0) == 0.0:
            bad, cells = sign_violations(rep.final_control, rep.final_gradient, sc.aset, self.grid)
            self.check("optimize", "interior cells with |D| > 1e-6 <= 1% of support", bad <= 0.01 * cells,
                       bad, 0.01 * cells)
            bb, ties = bang_bang_extract(rep.final_gradient, sc.aset, self.grid)
            bb_cost = problem.cost(bb)
            change = abs(bb_cost - costs[-1]) / abs(costs[-1]) if costs[-1] else abs(bb_cost)
            self.check("optimize", "bang-bang extraction changes cost <= 0.5%", change <= 5e-3, change, 5e-3)
            extra = {"sign_violations": bad, "support_cells": cells, "bang_bang_ties": ties,
                     "bang_bang_cost": bb_cost}
            self.write_field("control_bang_bang", bb, "zeta")
        self.results["optimized_control"] = rep.final_control
        self.write_field("control_optimized", rep.final_control, "zeta")
        self.write_field("gradient_optimized", rep.final_gradient, "D")
        self.write_json("optimize", {**rep.as_dict(), "baseline_cost": baseline, **extra})

    def stage_continuation(self):
        c = self.cfg["optimizer"]["continuation"]
        o = self.cfg["optimizer"]
        rep = continuation_in_h(self.sc, c["N0"], c["levels"], penalty_weight=c["penalty_weight"],
                                step0=o["step0"], max_iters=o["max_iters"], tol_resid=o["tol_resid"],
                                rtol_resid=o["rtol_resid"])
        levels = rep.h_levels
        changes = [lv["control_change_l2"] for lv in levels[1:]]
        deltas = [abs(b["cost_unpenalized"] - a["cost_unpenalized"]) for a, b in zip(levels, levels[1:])]
        self.check("continuation", "control changes non-increasing across levels",
                   all(b <= a for a, b in zip(changes, changes[1:])), changes)
        self.check("continuation", "cost deltas decreasing across levels",
                   all(b < a for a, b in zip(deltas, deltas[1:])), deltas)
        self.write_field("control_continuation", rep.final_control, "zeta")
        self.write_json("continuation", {**rep.as_dict(), "cost_deltas": deltas})

    def _ensemble(self):
        if "ensemble" not in self.results:
            p = self.cfg["particle"]
            zeta = self.control()
            traj = self.trajectory(zeta)
            steps = p["steps"] or self.sc.N
            ens = simulate(self.sc.rho0, zeta, self.sc.kernel, self.sc.model, mode=p["mode"],
                           traj=traj if p["mode"] == "frozen" else None, count=p["count"], steps=steps,
                           T=self.sc.T, seed=self.cfg.get("seed", 0), bandwidth=p["bandwidth"],
                           workers=self.threads)
            self.results["ensemble"] = (ens, zeta, traj)
        return self.results["ensemble"]

    def stage_particle(self):
        ens, zeta, _ = self._ensemble()
        est, se = mc_cost(ens, self.sc.cost, zeta)
        self.check("particle", "reflected particles <= 0.1%", ens.reflected <= 1e-3 * ens.count, ens.reflected)
        if self.cfg["particle"]["save_snapshot"]:
            path = self.out / "particles_final.csv"
            final = ens.positions[-1]
            cols = np.column_stack([np.arange(ens.count), final])
            header = ",".join(["particle"] + [f"x{k}" for k in range(self.grid.d)])
            np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.17g"] * self.grid.d)
            self._register("particles_final", path)
        self.write_json("particle", {"estimate": est, "stderr": se, "count": ens.count, "seed": ens.seed,
                                     "mode": ens.mode, "dt": ens.scheme_dt, "reflected": ens.reflected})

    def stage_crosscheck(self):
        ens, zeta, traj = self._ensemble()
        est, se = mc_cost(ens, self.sc.cost, zeta)
        pde = evaluate_cost(traj, zeta, self.sc.cost).total
        fine = evaluate_cost(self.sc.forward(zeta, N=2 * self.sc.N), zeta, self.sc.cost).total
        # first-order time error of the PDE cost, doubled to cover the SDE weak error at the same step
        allowance = 2.0 * abs(pde - fine)
        diff = abs(est - pde)
        self.check("crosscheck", "Monte Carlo cost within 3 stderr + allowance", diff <= 3 * se + allowance,
                   diff, 3 * se + allowance)
        boot = bootstrap_density_bound(ens, traj.final, replicates=self.cfg["particle"]["bootstrap"],
                                       seed=self.cfg.get("seed", 0), bandwidth=self.cfg["particle"]["bandwidth"])
        self.check("crosscheck", "density estimate within bootstrap bound", boot["passed"], boot["distance"],
                   boot["bound"])
        self.write_json("crosscheck", {"mc_estimate": est, "mc_stderr": se, "pde_cost": pde, "pde_cost_half_step": fine,
                                       "allowance": allowance, "difference": diff, "density": boot})


def run_scenario(cfg: dict, out: Path, stages=None, threads: int = 1) -> tuple[int, dict]:
    """Run the requested stages, write artifacts and ``manifest.json`` into ``out``."""
    stages = list(stages or cfg["stages"])
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {list(STAGES)}")
    stages = [s for s in STAGES if s in stages]
    out = Path(out)
    runner = Runner(cfg, out, threads)
    out.mkdir(parents=True, exist_ok=True)
    failure = None
    for stage in stages:
        t0 = time.perf_counter()
        try:
            getattr(runner, f"stage_{stage}")()
        except ConfigurationError:
            raise
        except (FPControlError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
            failure = {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
            runner.timings[stage] = time.perf_counter() - t0
            break
        runner.timings[stage] = time.perf_counter() - t0
    passed = failure is None and all(c["passed"] for c in runner.checks)
    code = EXIT_NUMERIC if failure else (EXIT_OK if passed else EXIT_CHECK)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "name": cfg.get("name", "scenario"),
        "config_hash": config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "versions": _versions(),
        "stages": stages,
        "checks": runner.checks,
        "artifacts": dict(sorted(runner.artifacts.items())),
        "warnings": runner.warnings,
        "failure": failure,
        "status": "pass" if passed else "fail",
        "exit_code": code,
        "runtime": {"timings_s": runner.timings, "threads": runner.threads},
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return code, manifest


def manifest_signature(manifest: dict) -> dict:
    """The manifest without volatile entries (timings, thread count)."""
    return {k: v for k, v in manifest.items() if k not in VOLATILE_KEYS}


def _load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


def compare_runs(manifest_a, manifest_b) -> dict:
    """Distances between final densities and controls, and cost deltas, of two runs."""
    ma, da = _load_manifest(manifest_a)
    mb, db = _load_manifest(manifest_b)
    ga = Grid(d=ma["config"]["d"], L=float(ma["config"]["L"]), n=ma["config"]["n"])
    gb = Grid(d=mb["config"]["d"], L=float(mb["config"]["L"]), n=mb["config"]["n"])
    if not ga.same_as(gb):
        raise GridMismatch(f"runs live on different grids: {ga} vs {gb}")
    report = {"grid": {"d": ga.d, "L": ga.L, "n": ga.n}, "fields": {}, "costs": {},
              "identical": manifest_signature(ma) == manifest_signature(mb)}
    for name in ("density_final", "control_input", "control_optimized", "control_continuation"):
        if name in ma["artifacts"] and name in mb["artifacts"]:
            _, fa = read_field_csv(da / ma["artifacts"][name]["path"], ga)
            _, fb = read_field_csv(db / mb["artifacts"][name]["path"], gb)
            diff = fa - fb
            report["fields"][name] = {"l1": float(np.sum(np.abs(diff)) * ga.cell_volume), "l2": _l2(ga, diff)}

    def read(directory, manifest, name):
        if name not in manifest["artifacts"]:
            return None
        return json.loads((directory / manifest["artifacts"][name]["path"]).read_text())

    fa, fb = read(da, ma, "forward"), read(db, mb, "forward")
    if fa and fb:
        report["costs"]["forward_total"] = fb["cost"]["total"] - fa["cost"]["total"]
    oa, ob = read(da, ma, "optimize"), read(db, mb, "optimize")
    if oa and ob:
        report["costs"]["optimized_total"] = ob["costs"][-1] - oa["costs"][-1]
    pa, pb = read(da, ma, "particle"), read(db, mb, "particle")
    if pa and pb:
        delta = pb["estimate"] - pa["estimate"]
        combined = float(np.hypot(pa["stderr"], pb["stderr"]))
        report["costs"]["particle_estimate"] = delta
        report["costs"]["particle_combined_stderr"] = combined
        report["costs"]["particle_within_3_stderr"] = abs(delta) <= 3 * combined
    return report


def _default_out(config_path: Path, cfg: dict, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    if cfg.get("output"):
        out = Path(cfg["output"])
        return out if out.is_absolute() else Path(cfg["_base_dir"]) / out
    root = Path(os.environ.get("FPCONTROL_OUT", "runs"))
    return root / config_path.stem


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpcontrol", description="Controlled nonlinear Fokker-Planck scenario runner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the stages of a scenario"),
                       ("gradcheck", "run forward, adjoint and gradient checks only")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
        s.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
        s.add_argument("--out", help="output directory (default: $FPCONTROL_OUT/<config name>)")
    c = sub.add_parser("compare", help="diff two run directories or manifests")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out", help="write the diff report here instead of stdout")
    r = sub.add_parser("config-reference", help="print the config key reference")
    r.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "config-reference":
        text = config_reference()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if args.command == "compare":
        try:
            report = compare_runs(args.a, args.b)
        except (GridMismatch, OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        text = json.dumps(report, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
        return EXIT_OK

    config_path = Path(args.config)
    try:
        cfg = load_config(config_path)
        if args.command == "gradcheck":
            stages = ["forward", "adjoint", "gradcheck"]
        else:
            stages = args.stages.split(",") if args.stages else None
        out = _default_out(config_path, cfg, args.out)
        code, manifest = run_scenario(cfg, out, stages, args.threads)
    except ConfigurationError as exc:
        print(f"{config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for chk in manifest["checks"]:
        print(f"[{'PASS' if chk['passed'] else 'FAIL'}] {chk['stage']}: {chk['name']}")
    for w in manifest["warnings"]:
        print(f"warning: {w}")
    if manifest["failure"]:
        print(f"numerical failure in stage {manifest['failure']['stage']}: {manifest['failure']['error']}",
              file=sys.stderr)
    print(f"manifest: {out / 'manifest.json'} ({manifest['status']})")
    return code


if __name__ == "__main__":
    sys.exit(main())
