"""Shared scenario builders for the test suite (reference desk scale: d=1, n=256, L=6, T=0.5, N=64)."""

import numpy as np

from fpcontrol.control import AdmissibleSet, make_kernel
from fpcontrol.grid import Grid
from fpcontrol.model import builtin_model, gaussian_density, gaussian_field, make_cost
from fpcontrol.optimize import Scenario

REF_L, REF_N_CELLS, REF_T, REF_STEPS = 6.0, 256, 0.5, 64


def repeller_scenario(n=REF_N_CELLS, N=REF_STEPS, c_Q=0.0, model="rational-cubic", L=REF_L, T=REF_T,
                      M0=2.0, R0=1.5, R=1.0):
    """Population starting slightly off a penalized region around the origin, repellers on B(0, R0)."""
    grid = Grid(1, L, n)
    target = gaussian_field([0.0], 0.7, 1.0)
    cost = make_cost(target, target, R0, c_Q=c_Q)
    return Scenario(grid=grid, model=builtin_model(model), kernel=make_kernel(R, grid),
                    aset=AdmissibleSet(M0, R0), cost=cost, rho0=gaussian_density([0.3], 0.5, 1), T=T, N=N)


def random_interior_control(sc, rng, lo=0.15, hi=0.85):
    M0 = sc.aset.M0
    return sc.project(rng.uniform(lo * M0, hi * M0, sc.grid.shape))


def random_direction(sc, rng):
    return np.where(sc.aset.mask(sc.grid), rng.standard_normal(sc.grid.shape), 0.0)


def random_density(grid, rng, peak=0.9, smooth=8):
    """Smooth positive random density with unit mass and max below ``peak``."""
    raw = rng.random(grid.shape) + 0.05
    kernel = np.ones(smooth) / smooth
    for ax in range(grid.d):
        raw = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), ax, raw)
    raw = np.maximum(raw, 1e-3)
    raw /= raw.sum() * grid.cell_volume
    if raw.max() > peak:
        raise ValueError("density too peaked for the chosen grid")
    return raw
