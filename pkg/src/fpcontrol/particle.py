"""Particle simulation of the controlled McKean-Vlasov dynamics and Monte Carlo costs.

Each particle follows

    dX = K(zeta)(X) b(rho(t, X)) dt + sqrt(2 Psi(rho(t, X))) dW

discretized by Euler-Maruyama.  In ``frozen`` mode ``rho`` is read from a
Fokker-Planck trajectory; in ``interacting`` mode it is re-estimated from the
ensemble itself at every step.  Fields are interpolated to particle positions
multilinearly between cell centers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .control import Kernel, nonlocal_drift
from .errors import ConfigurationError, ParticleEscape
from .fp import Trajectory
from .grid import Grid
from .model import CostSpec, InitialDensity, ModelFunctions, project_density

__all__ = [
    "ParticleEnsemble",
    "DensityEstimate",
    "simulate",
    "estimate_density",
    "silverman_bandwidth",
    "mc_cost",
    "bootstrap_density_bound",
]

ESCAPE_LIMIT = 1e-3


@dataclass
class ParticleEnsemble:
    positions: np.ndarray   # (steps+1, count, d)
    times: np.ndarray
    seed: int
    scheme_dt: float
    mode: str
    grid: Grid
    reflected: int = 0      # particles that touched the box edge at least once

    @property
    def count(self) -> int:
        return self.positions.shape[1]


@dataclass
class DensityEstimate:
    field: np.ndarray
    bandwidth: np.ndarray   # per axis


def _rng(seed: int, step: int) -> np.random.Generator:
    # one counter-based stream per (seed, step): independent of how particles are chunked
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))


def _sample_initial(rho0: InitialDensity | np.ndarray, grid: Grid, count: int, rng) -> np.ndarray:
    """Inverse CDF over cells of the projected density, then uniform inside the cell."""
    cells = project_density(rho0, grid) if isinstance(rho0, InitialDensity) else grid.check_field(rho0)
    cdf = np.cumsum(cells.ravel())
    cdf /= cdf[-1]
    u = rng.random(count)
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), grid.size - 1)
    idx = np.stack(np.unravel_index(flat, grid.shape), axis=1)
    jitter = rng.random((count, grid.d)) - 0.5
    return -grid.L + (idx + 0.5 + jitter) * grid.dx


def _interp(grid: Grid, field: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a cell-centered field at points ``x`` of shape (count, d)."""
    frac = ((x + grid.L) / grid.dx - 0.5).T
    return ndimage.map_coordinates(field, frac, order=1, mode="nearest")


def _reflect(x: np.ndarray, L: float) -> tuple[np.ndarray, np.ndarray]:
    hit = np.any(np.abs(x) > L, axis=1)
    if np.any(hit):
        x = np.where(x > L, 2 * L - x, x)
        x = np.where(x < -L, -2 * L - x, x)
        x = np.clip(x, -L, L)
    return x, hit


def simulate(
    rho0: InitialDensity | np.ndarray,
    zeta: np.ndarray,
    kernel: Kernel,
    model: ModelFunctions,
    mode: str = "frozen",
    traj: Trajectory | None = None,
    count: int = 10_000,
    steps: int = 64,
    T: float | None = None,
    seed: int = 0,
    bandwidth: float | None = None,
    chunk: int = 1 << 15,
    workers: int = 1,
) -> ParticleEnsemble:
    """Euler-Maruyama ensemble with all intermediate positions saved.

    ``T`` defaults to the trajectory horizon in frozen mode.  Particles that
    leave the box are reflected; more than 0.1% of particles ever reflecting
    raises :class:`ParticleEscape`.  Noise is drawn per step for the whole
    ensemble, so ``workers`` (threads over particle chunks) does not change
    the result.
    """
    if mode not in ("frozen", "interacting"):
        raise ConfigurationError(f"mode must be 'frozen' or 'interacting', got {mode!r}")
    grid = kernel.grid
    if mode == "frozen":
        if traj is None:
            raise ConfigurationError("frozen mode needs a Fokker-Planck trajectory")
        T = traj.T if T is None else T
    if T is None or T <= 0 or steps < 1 or count < 1:
        raise ConfigurationError("need T > 0, steps >= 1 and count >= 1")
    dt = T / steps
    drift = nonlocal_drift(zeta, kernel)

    x = _sample_initial(rho0, grid, count, _rng(seed, 0))
    out = np.empty((steps + 1, count, grid.d))
    out[0] = x
    ever = np.zeros(count, dtype=bool)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(steps):
            if mode == "frozen":
                rho_field = traj.at(k * dt)
            else:
                rho_field = estimate_density(x, grid, bandwidth).field
            noise = _rng(seed, k + 1).standard_normal((count, grid.d))
            new = np.empty_like(x)

            def move(s, x=x, rho_field=rho_field, noise=noise, new=new):
                xs = x[s:s + chunk]
                r = _interp(grid, rho_field, xs)
                vel = np.stack([_interp(grid, drift[j], xs) for j in range(grid.d)], axis=1) * model.b(r)[:, None]
                sig = np.sqrt(2.0 * model.psi(r) * dt)
                new[s:s + chunk] = xs + dt * vel + sig[:, None] * noise[s:s + chunk]

            starts = range(0, count, chunk)
            if pool is None:
                for s in starts:
                    move(s)
            else:
                list(pool.map(move, starts))
            x, hit = _reflect(new, grid.L)
            ever |= hit
            out[k + 1] = x
    finally:
        if pool is not None:
            pool.shutdown()
    reflected = int(ever.sum())
    if reflected > ESCAPE_LIMIT * count:
        raise ParticleEscape(f"{reflected} of {count} particles reached the box edge; enlarge L")
    return ParticleEnsemble(positions=out, times=np.linspace(0.0, T, steps + 1), seed=seed,
                            scheme_dt=dt, mode=mode, grid=grid, reflected=reflected)


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-axis rule-of-thumb bandwidth for points of shape (count, d)."""
    n, d = x.shape
    spread = np.std(x, axis=0, ddof=1) if n > 1 else np.zeros(d)
    return (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0)) * spread


def estimate_density(source, grid: Grid | None = None, bandwidth=None, time_index: int = -1) -> DensityEstimate:
    """Gaussian kernel density estimate at cell centers with unit discrete mass.

    ``source`` is an ensemble (``time_index`` selects the snapshot) or an array
    of points of shape (count, d).  Particles are binned onto the grid and the
    histogram is smoothed with a Gaussian filter; the bandwidth never drops
    below one cell.
    """
    if isinstance(source, ParticleEnsemble):
        grid = source.grid
        x = source.positions[time_index]
    else:
        x = np.asarray(source, dtype=float)
    if bandwidth is None:
        bw = silverman_bandwidth(x)
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.d,)).copy()
        if np.any(bw <= 0):
            raise ConfigurationError("bandwidth must be positive")
    bw = np.maximum(bw, grid.dx)
    edges = [np.linspace(-grid.L, grid.L, grid.n + 1)] * grid.d
    hist, _ = np.histogramdd(x, bins=edges)
    smooth = ndimage.gaussian_filter(hist, sigma=bw / grid.dx, mode="constant", truncate=6.0)
    smooth = np.maximum(smooth, 0.0)
    field = smooth / (smooth.sum() * grid.cell_volume)
    return DensityEstimate(field=field, bandwidth=bw)


def mc_cost(ens: ParticleEnsemble, cost: CostSpec, zeta: np.ndarray) -> tuple[float, float]:
    """Monte Carlo estimate of the cost and its standard error.

    Each path contributes the trapezoidal time integral of ``G`` plus
    ``G_T(X(T))``; the deterministic ``int Q(x, zeta)`` is added to the mean.
    """
    grid = ens.grid
    t = ens.times
    vals = np.stack([np.asarray(cost.G(ti, ens.positions[k].T), dtype=float) * np.ones(ens.count)
                     for k, ti in enumerate(t)])
    dt = np.diff(t)[:, None]
    running = np.sum(0.5 * (vals[1:] + vals[:-1]) * dt, axis=0)
    path = running + np.asarray(cost.G_T(ens.positions[-1].T), dtype=float)
    control = float(np.sum(np.asarray(cost.Q(grid.coords, zeta)))) * grid.cell_volume
    stderr = float(np.std(path, ddof=1) / np.sqrt(ens.count)) if ens.count > 1 else 0.0
    return float(np.mean(path)) + control, stderr


def bootstrap_density_bound(ens: ParticleEnsemble, reference: np.ndarray, replicates: int = 10,
                            seed: int = 0, bandwidth=None, factor: float = 5.0) -> dict:
    """Bound on the KDE-vs-reference L1 distance from resampled ensembles.

    The statistical part is the mean L1 distance between bootstrap KDEs and
    the full-ensemble KDE.  The bias part compares the KDE of the reference
    density itself (drawn with the same smoothing) with the reference.  The
    bound is ``factor * (statistical + bias)``.
    """
    grid = ens.grid
    x = ens.positions[-1]
    full = estimate_density(x, grid, bandwidth)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919])))
    vol = grid.cell_volume
    stat = []
    for _ in range(replicates):
        resample = x[rng.integers(0, len(x), len(x))]
        stat.append(float(np.sum(np.abs(estimate_density(resample, grid, full.bandwidth).field - full.field)) * vol))
    smoothed_ref = ndimage.gaussian_filter(reference, sigma=full.bandwidth / grid.dx, mode="constant", truncate=6.0)
    smoothed_ref /= smoothed_ref.sum() * vol
    bias = float(np.sum(np.abs(smoothed_ref - reference)) * vol)
    distance = float(np.sum(np.abs(full.field - reference)) * vol)
    statistical = float(np.mean(stat))
    bound = factor * (statistical + bias)
    return {"distance": distance, "statistical": statistical, "bias": bias, "bound": bound,
            "bandwidth": full.bandwidth.tolist(), "passed": distance <= bound}
