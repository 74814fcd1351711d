"""Scenario configuration: JSON schema, validation with line numbers, and builders."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .control import AdmissibleSet, make_kernel
from .errors import ConfigurationError
from .grid import Grid, read_field_csv
from .model import (
    CostSpec,
    InitialDensity,
    builtin_model,
    constant_field,
    gaussian_density,
    gaussian_field,
    make_cost,
    mollified_box,
)
from .optimize import Scenario

__all__ = [
    "SCHEMA",
    "STAGES",
    "ConfigError",
    "load_config",
    "validate_config",
    "with_defaults",
    "config_hash",
    "build_scenario",
    "build_field",
    "build_control",
    "config_reference",
]

SCHEMA_VERSION = 1
STAGES = ("validate", "forward", "adjoint", "gradcheck", "optimize", "continuation", "particle", "crosscheck")

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3}

_FIELD = {
    "description": "Spatial cost field from the catalog.",
    "oneOf": [
        {
            "type": "object",
            "properties": {"type": {"const": "constant"}, "value": {"type": "number", "minimum": 0}},
            "required": ["type", "value"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "gaussian"},
                "center": _vec,
                "width": {"type": "number", "exclusiveMinimum": 0},
                "amplitude": {"type": "number", "minimum": 0, "default": 1.0},
            },
            "required": ["type", "center", "width"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "mollified_box"},
                "lo": _vec,
                "hi": _vec,
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "amplitude": {"type": "number", "minimum": 0, "default": 1.0},
            },
            "required": ["type", "lo", "hi", "eps"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "tabulated"}, "path": {"type": "string"}},
            "required": ["type", "path"],
            "additionalProperties": False,
        },
    ],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fpcontrol scenario",
    "type": "object",
    "required": ["d", "L", "n", "T", "steps", "model", "kernel", "admissible", "initial", "cost"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION, "default": SCHEMA_VERSION,
                           "description": "Config format version."},
        "name": {"type": "string", "default": "scenario", "description": "Label copied into the manifest."},
        "d": {"type": "integer", "minimum": 1, "maximum": 3, "description": "Space dimension."},
        "L": {"type": "number", "exclusiveMinimum": 0, "description": "Half-width of the box [-L, L]^d."},
        "n": {"type": "integer", "minimum": 4, "description": "Cells per axis."},
        "T": {"type": "number", "exclusiveMinimum": 0, "description": "Time horizon."},
        "steps": {"type": "integer", "minimum": 1, "description": "Backward Euler steps N (h = T/N)."},
        "seed": {"type": "integer", "minimum": 0, "default": 0, "description": "Seed for every random draw."},
        "model": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "description": "Built-in coefficient model and declared hypothesis constants.",
            "properties": {
                "name": {"enum": ["linear", "rational-cubic"]},
                "gamma0": {"type": "number", "exclusiveMinimum": 0},
                "gamma1": {"type": "number", "exclusiveMinimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "b_sup": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "kernel": {
            "type": "object",
            "required": ["R"],
            "additionalProperties": False,
            "description": "Interaction kernel.",
            "properties": {
                "R": {"type": "number", "exclusiveMinimum": 0, "description": "Support radius."},
                "profile": {"enum": ["poly6"], "default": "poly6"},
            },
        },
        "admissible": {
            "type": "object",
            "required": ["M0", "R0"],
            "additionalProperties": False,
            "description": "Control bounds 0 <= zeta <= M0 on the support set of radius R0.",
            "properties": {
                "M0": {"type": "number", "minimum": 0},
                "R0": {"type": "number", "exclusiveMinimum": 0},
                "shape": {"enum": ["ball", "box"], "default": "ball"},
            },
        },
        "initial": {
            "description": "Initial density: a Gaussian or a tabulated grid field.",
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"type": {"const": "gaussian"}, "center": _vec,
                                   "std": {"type": "number", "exclusiveMinimum": 0}},
                    "required": ["type", "center", "std"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"type": {"const": "tabulated"}, "path": {"type": "string"}},
                    "required": ["type", "path"],
                    "additionalProperties": False,
                },
            ],
        },
        "cost": {
            "type": "object",
            "required": ["G", "G_T"],
            "additionalProperties": False,
            "description": "Running cost G(x), terminal cost G_T(x) and Q(x, z) = c_Q z^2 / 2 on the support.",
            "properties": {
                "G": _FIELD,
                "G_T": _FIELD,
                "c_Q": {"type": "number", "minimum": 0, "default": 0.0},
            },
        },
        "control": {
            "description": "Control used by the forward, adjoint, gradcheck and particle stages "
                           "when no optimized control is available.",
            "default": {"type": "constant", "value": 0.0},
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"type": {"const": "constant"}, "value": {"type": "number", "minimum": 0}},
                    "required": ["type", "value"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"type": {"const": "interval"}, "lo": _vec, "hi": _vec,
                                   "value": {"type": "number", "minimum": 0}},
                    "required": ["type", "lo", "hi", "value"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"type": {"const": "random"}, "lo": {"type": "number", "minimum": 0},
                                   "hi": {"type": "number", "minimum": 0}},
                    "required": ["type"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"type": {"const": "tabulated"}, "path": {"type": "string"}},
                    "required": ["type", "path"],
                    "additionalProperties": False,
                },
            ],
        },
        "newton_tol": {"type": "number", "exclusiveMinimum": 0, "default": 1e-11,
                       "description": "L1 residual tolerance of each implicit step."},
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "directions": {"type": "integer", "minimum": 1, "default": 5},
                "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                        "default": [1e-2, 1e-3, 1e-4, 1e-5]},
                "tolerance": {"type": "number", "exclusiveMinimum": 0, "default": 1e-3},
                "duality_tolerance": {"type": "number", "exclusiveMinimum": 0, "default": 1e-6},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "max_iters": {"type": "integer", "minimum": 0, "default": 200},
                "step0": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": None,
                          "description": "Initial step; null picks one from the first gradient."},
                "rtol_resid": {"type": "number", "minimum": 0, "default": 1e-5},
                "tol_resid": {"type": "number", "minimum": 0, "default": 0.0},
                "penalty_weight": {"type": "number", "minimum": 0, "default": 0.0},
                "start": {"enum": ["midpoint", "control"], "default": "midpoint",
                          "description": "Start at M0/2 on the support or at the configured control."},
                "residual_reduction": {"type": "number", "exclusiveMinimum": 0, "default": 1e-4,
                                       "description": "Pass threshold on final/initial optimality residual."},
                "continuation": {
                    "type": "object",
                    "additionalProperties": False,
                    "default": {},
                    "properties": {
                        "N0": {"type": "integer", "minimum": 1, "default": 32},
                        "levels": {"type": "integer", "minimum": 2, "default": 3},
                        "penalty_weight": {"type": "number", "minimum": 0, "default": 0.0},
                    },
                },
            },
        },
        "particle": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "count": {"type": "integer", "minimum": 2, "default": 100000},
                "steps": {"type": ["integer", "null"], "minimum": 1, "default": None,
                          "description": "SDE steps; null uses the PDE step count."},
                "mode": {"enum": ["frozen", "interacting"], "default": "frozen"},
                "bandwidth": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": None},
                "bootstrap": {"type": "integer", "minimum": 2, "default": 10},
                "save_snapshot": {"type": "boolean", "default": True},
            },
        },
        "stages": {"type": "array", "items": {"enum": list(STAGES)}, "uniqueItems": True,
                   "default": ["validate", "forward"]},
        "output": {"type": ["string", "null"], "default": None, "description": "Output directory."},
    },
}


class ConfigError(ConfigurationError):
    """Schema or consistency violation; ``line`` points into the config text when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


def _locate(text: str, path) -> int | None:
    """Best-effort line of a JSON path: follow object keys in order through the text."""
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        needle = f'"{key}"'
        i = text.find(needle, pos)
        if i < 0:
            break
        pos = i + len(needle)
        found = text.count("\n", 0, i) + 1
    return found


def validate_config(cfg: dict, text: str | None = None) -> dict:
    """Schema check plus cross-field invariants; returns the config with defaults filled."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line = _locate(text, path) if text else None
        if line is None and text:
            line = 1
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{dotted}: {err.message}", line=line, path=path)
    full = with_defaults(cfg)
    if full["admissible"]["R0"] + full["kernel"]["R"] >= full["L"]:
        raise ConfigError("R0 + R must be < L so the controlled region fits in the box",
                          line=_locate(text, ["admissible", "R0"]) if text else None, path=["admissible", "R0"])
    for key in ("G", "G_T"):
        f = full["cost"][key]
        for part in ("center", "lo", "hi"):
            if part in f and len(f[part]) != full["d"]:
                raise ConfigError(f"cost.{key}.{part} must have {full['d']} entries",
                                  line=_locate(text, ["cost", key, part]) if text else None)
    if full["initial"].get("type") == "gaussian" and len(full["initial"]["center"]) != full["d"]:
        raise ConfigError(f"initial.center must have {full['d']} entries",
                          line=_locate(text, ["initial", "center"]) if text else None)
    return full


def _fill(schema: dict, value):
    if isinstance(value, dict) and "properties" in schema:
        out = dict(value)
        for key, sub in schema["properties"].items():
            if key not in out and "default" in sub:
                out[key] = copy.deepcopy(sub["default"])
            if key in out:
                out[key] = _fill(sub, out[key])
        return out
    return value


def with_defaults(cfg: dict) -> dict:
    return _fill(SCHEMA, copy.deepcopy(cfg))


def load_config(path) -> dict:
    """Read, parse and validate a config file; errors carry line numbers."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    full = validate_config(cfg, text)
    full["_base_dir"] = str(path.resolve().parent)
    return full


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "output"}
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _resolve(cfg: dict, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(cfg.get("_base_dir", ".")) / path


def build_field(spec: dict, grid: Grid, cfg: dict | None = None):
    kind = spec["type"]
    if kind == "constant":
        return constant_field(spec["value"])
    if kind == "gaussian":
        return gaussian_field(spec["center"], spec["width"], spec.get("amplitude", 1.0))
    if kind == "mollified_box":
        return mollified_box(spec["lo"], spec["hi"], spec["eps"], spec.get("amplitude", 1.0))
    if kind == "tabulated":
        _, values = read_field_csv(_resolve(cfg or {}, spec["path"]), grid)
        if np.any(values < 0):
            raise ConfigError(f"tabulated field {spec['path']} has negative values")

        def fn(x):
            shape = np.shape(x)[1:]
            if shape != grid.shape:
                raise ConfigError("tabulated fields can only be evaluated at the grid cell centers")
            return values

        return fn
    raise ConfigError(f"unknown catalog entry {kind!r}")


def build_cost(cfg: dict, grid: Grid) -> CostSpec:
    c = cfg["cost"]
    return make_cost(build_field(c["G"], grid, cfg), build_field(c["G_T"], grid, cfg), cfg["admissible"]["R0"],
                     c_Q=c.get("c_Q", 0.0), description=c)


def build_initial(cfg: dict, grid: Grid) -> InitialDensity:
    init = cfg["initial"]
    if init["type"] == "gaussian":
        return gaussian_density(init["center"], init["std"], cfg["d"])
    _, values = read_field_csv(_resolve(cfg, init["path"]), grid)
    if np.any(values < 0):
        raise ConfigError("tabulated initial density has negative values")
    values = values / (values.sum() * grid.cell_volume)
    return InitialDensity(rho0=lambda x: values, analytic_mass=1.0)


@dataclass
class BuiltScenario:
    scenario: Scenario
    control: np.ndarray


def build_control(cfg: dict, scenario: Scenario) -> np.ndarray:
    spec = cfg.get("control") or {"type": "constant", "value": 0.0}
    grid = scenario.grid
    kind = spec["type"]
    if kind == "constant":
        raw = np.full(grid.shape, float(spec["value"]))
    elif kind == "interval":
        lo = np.asarray(spec["lo"], dtype=float).reshape((-1,) + (1,) * grid.d)
        hi = np.asarray(spec["hi"], dtype=float).reshape((-1,) + (1,) * grid.d)
        inside = np.all((grid.coords >= lo) & (grid.coords <= hi), axis=0)
        raw = np.where(inside, float(spec["value"]), 0.0)
    elif kind == "random":
        rng = np.random.default_rng([cfg.get("seed", 0), 11])
        M0 = scenario.aset.M0
        raw = rng.uniform(spec.get("lo", 0.0), spec.get("hi", M0), grid.shape)
    else:
        _, raw = read_field_csv(_resolve(cfg, spec["path"]), grid)
    return scenario.project(raw)


def build_scenario(cfg: dict) -> BuiltScenario:
    grid = Grid(d=cfg["d"], L=float(cfg["L"]), n=cfg["n"])
    m = cfg["model"]
    model = builtin_model(m["name"], **{k: v for k, v in m.items() if k != "name"})
    kernel = make_kernel(cfg["kernel"]["R"], grid, cfg["kernel"].get("profile", "poly6"))
    a = cfg["admissible"]
    aset = AdmissibleSet(M0=a["M0"], R0=a["R0"], shape=a.get("shape", "ball"))
    sc = Scenario(grid=grid, model=model, kernel=kernel, aset=aset, cost=build_cost(cfg, grid),
                  rho0=build_initial(cfg, grid), T=float(cfg["T"]), N=cfg["steps"],
                  newton_tol=cfg.get("newton_tol", 1e-11))
    return BuiltScenario(scenario=sc, control=build_control(cfg, sc))


def config_reference() -> str:
    """Markdown page listing every config key, its type, default and description."""
    lines = ["# Scenario config reference", "",
             "Generated from the JSON schema in `fpcontrol.config`. Keys marked required have no default.", "",
             "| key | type | required | default | description |", "|---|---|---|---|---|"]

    def kind(s):
        if "type" in s:
            return s["type"] if isinstance(s["type"], str) else " or ".join(s["type"])
        if "enum" in s:
            return "one of " + ", ".join(f"`{v}`" for v in s["enum"])
        if "oneOf" in s:
            return "one of: " + ", ".join(f"`{o['properties']['type']['const']}`" for o in s["oneOf"])
        if "const" in s:
            return f"`{s['const']}`"
        return ""

    def walk(schema, prefix, required):
        for key, sub in schema.get("properties", {}).items():
            name = f"{prefix}{key}"
            default = json.dumps(sub["default"]) if "default" in sub else ""
            lines.append(f"| `{name}` | {kind(sub)} | {'yes' if key in required else ''} | {default} | "
                         f"{sub.get('description', '')} |")
            if "properties" in sub:
                walk(sub, name + ".", sub.get("required", []))
            for alt in sub.get("oneOf", []):
                t = alt["properties"]["type"]["const"]
                for k2, s2 in alt["properties"].items():
                    if k2 == "type":
                        continue
                    d2 = json.dumps(s2["default"]) if "default" in s2 else ""
                    lines.append(f"| `{name}.{k2}` ({t}) | {kind(s2)} | "
                                 f"{'yes' if k2 in alt.get('required', []) else ''} | {d2} | |")

    walk(SCHEMA, "", SCHEMA["required"])
    return "\n".join(lines) + "\n"
