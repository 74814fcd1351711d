"""Model nonlinearities, cost data and sampled checks of the standing hypotheses.

The diffusion nonlinearity ``beta`` and the drift mobility ``b`` enter the
equation

    d rho/dt = -div(K(zeta) b(rho) rho) + Laplacian beta(rho)

through ``beta``, ``beta'``, ``b* = b r`` and ``(b*)'``.  The particle picture
uses ``Psi(r) = beta(r)/r`` (extended by ``beta'(0)`` at zero) for the noise
intensity ``sigma = sqrt(2 Psi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .grid import Grid

__all__ = [
    "ModelFunctions",
    "CostSpec",
    "InitialDensity",
    "Check",
    "ValidationReport",
    "builtin_model",
    "gaussian_density",
    "project_density",
    "validate_hypotheses",
    "constant_field",
    "gaussian_field",
    "mollified_box",
    "quadratic_control_cost",
    "zero_control_cost",
    "make_cost",
]

ScalarFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelFunctions:
    """Nonlinearities and the constants they are declared to satisfy."""

    name: str
    beta: ScalarFn
    beta_prime: ScalarFn
    psi: ScalarFn
    b: ScalarFn
    b_prime: ScalarFn
    gamma0: float
    gamma1: float
    alpha: float
    b_sup: float

    def b_star(self, r):
        r = np.asarray(r, dtype=float)
        return self.b(r) * r

    def b_star_prime(self, r):
        r = np.asarray(r, dtype=float)
        return self.b_prime(r) * r + self.b(r)

    def sigma(self, r):
        return np.sqrt(2.0 * self.psi(r))


def _b_rational(r):
    r = np.asarray(r, dtype=float)
    return 1.0 / (1.0 + r * r)


def _b_rational_prime(r):
    r = np.asarray(r, dtype=float)
    return -2.0 * r / (1.0 + r * r) ** 2


def _linear_model() -> ModelFunctions:
    def one(r):
        return np.ones_like(np.asarray(r, dtype=float))

    return ModelFunctions(
        name="linear",
        beta=lambda r: np.asarray(r, dtype=float) * 1.0,
        beta_prime=one,
        psi=one,
        b=_b_rational,
        b_prime=_b_rational_prime,
        gamma0=1.0,
        gamma1=1.0,
        alpha=1.0,
        b_sup=1.0,
    )


def _rational_cubic_model() -> ModelFunctions:
    # beta(r) = r + r^3 / (2 (1 + r^2));  beta' - 1 peaks at 9/16 where r^2 = 3
    def beta(r):
        r = np.asarray(r, dtype=float)
        return r + r**3 / (2.0 * (1.0 + r * r))

    def beta_prime(r):
        r = np.asarray(r, dtype=float)
        r2 = r * r
        return 1.0 + (3.0 * r2 + r2 * r2) / (2.0 * (1.0 + r2) ** 2)

    def psi(r):
        r = np.asarray(r, dtype=float)
        r2 = r * r
        return 1.0 + r2 / (2.0 * (1.0 + r2))

    return ModelFunctions(
        name="rational-cubic",
        beta=beta,
        beta_prime=beta_prime,
        psi=psi,
        b=_b_rational,
        b_prime=_b_rational_prime,
        gamma0=1.0,
        gamma1=1.5625,
        alpha=1.0,
        b_sup=1.0,
    )


_BUILTIN = {"linear": _linear_model, "rational-cubic": _rational_cubic_model}


def builtin_model(name: str, **overrides) -> ModelFunctions:
    """Return a named model; ``overrides`` replace declared constants (gamma0, ...)."""
    try:
        model = _BUILTIN[name]()
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(_BUILTIN)}") from None
    if overrides:
        allowed = {"gamma0", "gamma1", "alpha", "b_sup"}
        bad = set(overrides) - allowed
        if bad:
            raise ConfigurationError(f"cannot override {sorted(bad)} on a builtin model")
        model = ModelFunctions(**{**model.__dict__, **{k: float(v) for k, v in overrides.items()}})
    return model


# --------------------------------------------------------------------------
# cost data


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``G(t, x)``, terminal cost ``G_T(x)`` and control cost ``Q(x, z)``.

    Spatial arguments are coordinate arrays of shape ``(d, ...)``.
    """

    G: Callable[[float, np.ndarray], np.ndarray]
    G_T: Callable[[np.ndarray], np.ndarray]
    Q: Callable[[np.ndarray, np.ndarray], np.ndarray]
    Q_z: Callable[[np.ndarray, np.ndarray], np.ndarray]
    R0: float
    time_dependent: bool = False
    description: dict = field(default_factory=dict, compare=False)


def constant_field(value: float) -> Callable[[np.ndarray], np.ndarray]:
    def fn(x):
        return np.full(np.shape(x)[1:], float(value))

    return fn


def gaussian_field(center, width: float, amplitude: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))

    def fn(x):
        x = np.asarray(x, dtype=float)
        shift = x - c.reshape((-1,) + (1,) * (x.ndim - 1))
        return amplitude * np.exp(-np.sum(shift**2, axis=0) / (2.0 * width**2))

    return fn


def mollified_box(lo, hi, eps: float, amplitude: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Smoothed indicator of the box ``[lo, hi]`` (tanh edges of width ``eps``)."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))

    def fn(x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[1:], float(amplitude))
        for k in range(x.shape[0]):
            out = out * 0.5 * (np.tanh((x[k] - lo[k]) / eps) - np.tanh((x[k] - hi[k]) / eps))
        return out

    return fn


def quadratic_control_cost(c_Q: float, R0: float):
    """``Q(x, z) = c_Q z^2 / 2`` on the ball of radius ``R0``, zero outside."""

    def inside(x):
        return np.sqrt(np.sum(np.asarray(x, dtype=float) ** 2, axis=0)) <= R0

    def Q(x, z):
        return np.where(inside(x), 0.5 * c_Q * np.asarray(z, dtype=float) ** 2, 0.0)

    def Q_z(x, z):
        return np.where(inside(x), c_Q * np.asarray(z, dtype=float), 0.0)

    return Q, Q_z


def zero_control_cost():
    def Q(x, z):
        return np.zeros(np.broadcast_shapes(np.shape(x)[1:], np.shape(z)))

    return Q, Q


def make_cost(G_x, G_T, R0: float, c_Q: float = 0.0, G_t=None, description=None) -> CostSpec:
    """Assemble a :class:`CostSpec` from time-independent pieces.

    ``G_t`` optionally replaces the running cost by a full ``(t, x)`` function.
    """
    Q, Q_z = quadratic_control_cost(c_Q, R0) if c_Q > 0 else zero_control_cost()
    if G_t is None:
        def G(t, x):
            return G_x(x)
    else:
        G = G_t
    return CostSpec(G=G, G_T=G_T, Q=Q, Q_z=Q_z, R0=R0, time_dependent=G_t is not None,
                    description=dict(description or {}))


# --------------------------------------------------------------------------
# initial density


@dataclass(frozen=True)
class InitialDensity:
    rho0: Callable[[np.ndarray], np.ndarray]
    analytic_mass: float = 1.0
    mean: np.ndarray | None = None
    variance: float | None = None  # per-axis variance when known in closed form


def gaussian_density(center, std: float, d: int = 1) -> InitialDensity:
    c = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()
    norm = (2.0 * np.pi * std**2) ** (-d / 2.0)
    shape = gaussian_field(c, std, amplitude=norm)
    return InitialDensity(rho0=shape, analytic_mass=1.0, mean=c, variance=std**2)


def project_density(rho0: InitialDensity, grid: Grid) -> np.ndarray:
    """Sample at cell centers and renormalize to unit discrete mass."""
    if not np.isclose(rho0.analytic_mass, 1.0, rtol=0, atol=1e-12):
        raise ConfigurationError(f"initial density must have unit mass, got {rho0.analytic_mass}")
    vals = np.asarray(rho0.rho0(grid.coords), dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ConfigurationError("initial density must be finite and nonnegative")
    mass = vals.sum() * grid.cell_volume
    if mass <= 0:
        raise ConfigurationError("initial density has no mass on the grid")
    return vals / mass


# --------------------------------------------------------------------------
# hypothesis validation


@dataclass
class Check:
    name: str
    passed: bool
    worst: float = 0.0
    witness: object = None
    nonfinite: bool = False

    def as_dict(self):
        w = self.witness
        if isinstance(w, np.ndarray):
            w = w.tolist()
        elif isinstance(w, (np.floating, np.integer)):
            w = w.item()
        elif isinstance(w, tuple):
            w = [x.tolist() if isinstance(x, np.ndarray) else float(x) for x in w]
        return {"name": self.name, "passed": bool(self.passed), "worst": float(self.worst),
                "witness": w, "nonfinite": bool(self.nonfinite)}


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def as_dict(self):
        return {"passed": self.passed, "checks": [c.as_dict() for c in self.checks]}


def _bound_check(name, values, points, limit_ok, violation):
    """Generic sampled check: ``violation`` >= 0 measures how badly a point fails."""
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not np.all(finite):
        bad = np.flatnonzero(~finite.ravel())[0]
        return Check(name, False, float("inf"), _witness(points, bad), nonfinite=True)
    v = np.asarray(violation(values), dtype=float)
    worst_idx = int(np.argmax(v))
    worst = float(v.ravel()[worst_idx])
    return Check(name, bool(limit_ok(worst)), max(worst, 0.0), _witness(points, worst_idx))


def _witness(points, flat_idx):
    if isinstance(points, tuple):
        return tuple(np.asarray(p).ravel()[flat_idx] for p in points)
    pts = np.asarray(points)
    if pts.ndim > 1:
        return pts.reshape(pts.shape[0], -1)[:, flat_idx]
    return pts.ravel()[flat_idx]


def validate_hypotheses(
    model: ModelFunctions,
    cost: CostSpec | None = None,
    rho0: InitialDensity | None = None,
    r_range: tuple[float, float] = (-10.0, 10.0),
    samples: int = 2001,
    grid: Grid | None = None,
    z_max: float = 1.0,
    t_max: float = 1.0,
    tol: float = 1e-12,
) -> ValidationReport:
    """Falsify the standing assumptions by dense sampling.

    Every check reports the worst violation and the sample where it occurs.
    Cost and density checks need ``grid`` for their spatial samples.
    """
    if samples < 2:
        raise ConfigurationError("need at least 2 samples")
    lo, hi = map(float, r_range)
    if not hi > lo:
        raise ConfigurationError(f"empty sampling range {r_range}")
    r = np.linspace(lo, hi, samples)
    rpos = r[r >= 0] if np.any(r >= 0) else np.linspace(0.0, max(hi, 1.0), samples)
    checks = []

    with np.errstate(all="ignore"):
        b0 = float(np.asarray(model.beta(np.array(0.0))))
        checks.append(Check("beta(0)=0", np.isfinite(b0) and b0 == 0.0, abs(b0), 0.0, nonfinite=not np.isfinite(b0)))

        bp = model.beta_prime(r)
        checks.append(_bound_check("gamma0>0", np.array([model.gamma0]), np.array([0.0]),
                                   lambda w: w <= 0, lambda v: -v))
        checks.append(_bound_check("beta'>=gamma0", bp, r, lambda w: w <= tol, lambda v: model.gamma0 - v))
        checks.append(_bound_check("beta'<=gamma1", bp, r, lambda w: w <= tol, lambda v: v - model.gamma1))

        # Lipschitz ratio of b* against beta over all sample pairs (subsampled if large)
        rr = r if r.size <= 1500 else r[np.linspace(0, r.size - 1, 1500).astype(int)]
        bs = model.b_star(rr)
        be = model.beta(rr)
        i, j = np.triu_indices(rr.size, k=1)
        lhs = np.abs(bs[i] - bs[j])
        rhs = model.alpha * np.abs(be[i] - be[j])
        checks.append(_bound_check("|b*(r)-b*(s)|<=alpha|beta(r)-beta(s)|", lhs - rhs, (rr[i], rr[j]),
                                   lambda w: w <= tol * (1 + np.max(np.abs(bs), initial=0)), lambda v: v))

        bpos = model.b(rpos)
        checks.append(_bound_check("b>=0 on r>=0", bpos, rpos, lambda w: w <= 0, lambda v: -v))
        checks.append(_bound_check("|b|<=b_sup", model.b(r), r, lambda w: w <= tol, lambda v: np.abs(v) - model.b_sup))

        sig2 = model.sigma(rpos) ** 2
        checks.append(_bound_check("sigma^2=2Psi>=2gamma0>0", sig2, rpos, lambda w: w <= tol,
                                   lambda v: np.maximum(2 * model.gamma0 - v, -v)))

        if cost is not None:
            if grid is None:
                raise ConfigurationError("cost checks need a grid for spatial samples")
            x = grid.coords
            ts = np.linspace(0.0, t_max, 5)
            gvals = np.stack([np.asarray(cost.G(t, x), dtype=float) for t in ts])
            checks.append(_nonneg_check("G>=0", gvals, x, ts))
            gt = np.asarray(cost.G_T(x), dtype=float)
            checks.append(_nonneg_check("G_T>=0", gt[None], x, [t_max]))

            zs = np.linspace(0.0, z_max, 21)
            qvals = np.stack([np.asarray(cost.Q(x, np.full(grid.shape, z)), dtype=float) for z in zs])
            checks.append(_nonneg_check("Q>=0", qvals, x, zs))
            outside = grid.radius > cost.R0
            if np.any(outside):
                out_vals = np.abs(qvals[:, outside])
                zz = np.repeat(zs, out_vals.shape[1])
                checks.append(_bound_check("Q=0 for |x|>R0", out_vals, zz, lambda w: w <= 0, lambda v: v))
            else:
                checks.append(Check("Q=0 for |x|>R0", True))
            # midpoint convexity on all triples (z1, z2, (z1+z2)/2)
            i, j = np.triu_indices(zs.size, k=1)
            mid = np.stack([np.asarray(cost.Q(x, np.full(grid.shape, z)), dtype=float) for z in 0.5 * (zs[i] + zs[j])])
            viol = mid - 0.5 * (qvals[i] + qvals[j]) - 1e-12
            zi = np.repeat(zs[i], viol[0].size)
            zj = np.repeat(zs[j], viol[0].size)
            checks.append(_bound_check("Q convex in z", viol, (zi, zj), lambda w: w <= 0, lambda v: v))

        if rho0 is not None:
            if grid is None:
                raise ConfigurationError("density checks need a grid for spatial samples")
            vals = np.asarray(rho0.rho0(grid.coords), dtype=float)
            checks.append(_nonneg_check("rho0>=0", vals[None], grid.coords, [0.0]))
            mass_ok = abs(rho0.analytic_mass - 1.0)
            checks.append(Check("analytic mass=1", mass_ok <= 1e-12, mass_ok, rho0.analytic_mass))
            if np.all(np.isfinite(vals)) and vals.sum() > 0:
                proj = project_density(rho0, grid) if np.all(vals >= 0) else vals / (vals.sum() * grid.cell_volume)
                drift = abs(proj.sum() * grid.cell_volume - 1.0)
                checks.append(Check("discrete mass=1", drift <= 1e-14, drift, None))
    return ValidationReport(checks)


def _nonneg_check(name, vals, x, params):
    """Nonnegativity over a stack of fields indexed by ``params``."""
    vals = np.asarray(vals, dtype=float)
    finite = np.isfinite(vals)
    if not np.all(finite):
        k, *cell = np.unravel_index(np.flatnonzero(~finite)[0], vals.shape)
        return Check(name, False, float("inf"), (params[k], x[(slice(None),) + tuple(cell)]), nonfinite=True)
    k, *cell = np.unravel_index(int(np.argmin(vals)), vals.shape)
    worst = float(-vals[(k, *cell)])
    return Check(name, worst <= 0, max(worst, 0.0), (params[k], x[(slice(None),) + tuple(cell)]))
