"""Admissible controls, the interaction kernel and the nonlocal drift.

The control ``zeta`` is a density of repellers in ``[0, M0]`` supported in a
ball (or box) of radius ``R0``.  It acts on the population through

    K(zeta)(x) = -grad (G_R * zeta)(x) = -sum_x' grad G_R(x - x') zeta(x') dx^d,

evaluated by direct summation over the compact kernel stencil with the
analytic kernel gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gamma, pi
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, KernelUnderResolved
from .grid import Grid

__all__ = [
    "Kernel",
    "AdmissibleSet",
    "make_kernel",
    "nonlocal_drift",
    "kernel_correlate",
    "project_admissible",
    "drift_bounds",
]


def _poly6_mass(d: int) -> float:
    # integral of (1 - |x|^2)^3 over the unit ball in R^d
    return 6.0 * pi ** (d / 2.0) / gamma(d / 2.0 + 4.0)


def _poly6(R: float, d: int):
    c_R = 1.0 / (_poly6_mass(d) * R**d)

    def g(x):
        s = np.sum(np.asarray(x, dtype=float) ** 2, axis=0) / R**2
        return np.where(s < 1.0, c_R * (1.0 - s) ** 3, 0.0)

    def grad_g(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x**2, axis=0) / R**2
        w = np.where(s < 1.0, -6.0 * c_R * (1.0 - s) ** 2 / R**2, 0.0)
        return w * x

    return c_R, g, grad_g


_PROFILES = {"poly6": _poly6}


@dataclass(frozen=True)
class Kernel:
    """Compactly supported radial kernel sampled on the grid offsets ``|o| < R``."""

    R: float
    profile: str
    grid: Grid
    c_R: float
    g: Callable[[np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray], np.ndarray]
    stencil: np.ndarray       # G_R at offsets, shape (2m+1,)*d
    grad_stencil: np.ndarray  # grad G_R at offsets, shape (d, (2m+1,)*d)

    @property
    def half_width(self) -> int:
        return (self.stencil.shape[0] - 1) // 2

    @property
    def offsets(self) -> np.ndarray:
        m = self.half_width
        ax = np.arange(-m, m + 1) * self.grid.dx
        return np.stack(np.meshgrid(*([ax] * self.grid.d), indexing="ij"))


@dataclass(frozen=True)
class AdmissibleSet:
    """Controls with ``0 <= zeta <= M0`` vanishing outside the support set.

    ``shape`` is ``"ball"`` (Euclidean radius ``R0``) or ``"box"``
    (``max_k |x_k| <= R0``).
    """

    M0: float
    R0: float
    shape: str = "ball"

    def __post_init__(self):
        if not (self.M0 >= 0 and self.R0 > 0):
            raise ConfigurationError(f"need M0 >= 0 and R0 > 0, got M0={self.M0}, R0={self.R0}")
        if self.shape not in ("ball", "box"):
            raise ConfigurationError(f"support shape must be 'ball' or 'box', got {self.shape!r}")

    def mask(self, grid: Grid) -> np.ndarray:
        if self.shape == "ball":
            return grid.radius <= self.R0
        return np.max(np.abs(grid.coords), axis=0) <= self.R0


def make_kernel(R: float, grid: Grid, profile: str = "poly6") -> Kernel:
    """Build the kernel and its stencil; default profile ``c_R (1 - |x|^2/R^2)^3``."""
    if R <= 2.0 * grid.dx:
        raise KernelUnderResolved(f"kernel under-resolved: R={R} <= 2 dx={2 * grid.dx}")
    try:
        c_R, g, grad_g = _PROFILES[profile](R, grid.d)
    except KeyError:
        raise ConfigurationError(f"unknown kernel profile {profile!r}") from None
    m = int(np.ceil(R / grid.dx))
    ax = np.arange(-m, m + 1) * grid.dx
    off = np.stack(np.meshgrid(*([ax] * grid.d), indexing="ij"))
    stencil = g(off)
    grad_stencil = grad_g(off)
    flipped = stencil[(slice(None, None, -1),) * grid.d]
    if not np.allclose(stencil, flipped, rtol=0, atol=1e-14 * max(1.0, np.abs(stencil).max())):
        raise ConfigurationError("kernel must be even")
    return Kernel(R=R, profile=profile, grid=grid, c_R=c_R, g=g, grad_g=grad_g,
                  stencil=stencil, grad_stencil=grad_stencil)


def _convolve(f: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return ndimage.convolve(f, weights, mode="constant", cval=0.0)


def nonlocal_drift(zeta: np.ndarray, kernel: Kernel) -> np.ndarray:
    """``K(zeta)`` at all cell centers, shape ``(d, *grid.shape)``."""
    grid = kernel.grid
    zeta = grid.check_field(zeta)
    vol = grid.cell_volume
    return np.stack([-vol * _convolve(zeta, kernel.grad_stencil[k]) for k in range(grid.d)])


def kernel_correlate(c: np.ndarray, kernel: Kernel) -> np.ndarray:
    """``x' -> sum_x grad G_R(x - x') . c(x) dx^d`` for a vector field ``c``.

    This is the transpose of :func:`nonlocal_drift`: for any scalar ``xi``,
    ``<nonlocal_drift(xi), c> = -<xi, kernel_correlate(c)>``.  Oddness of
    ``grad G_R`` turns the correlation into a convolution.
    """
    grid = kernel.grid
    vol = grid.cell_volume
    out = np.zeros(grid.shape)
    for k in range(grid.d):
        out -= vol * _convolve(np.asarray(c[k], dtype=float), kernel.grad_stencil[k])
    return out


def project_admissible(f: np.ndarray, aset: AdmissibleSet, grid: Grid) -> np.ndarray:
    """Cellwise Euclidean projection onto the admissible box-and-support set."""
    f = grid.check_field(f)
    return np.where(aset.mask(grid), np.clip(f, 0.0, aset.M0), 0.0)


def drift_bounds(kernel: Kernel, aset: AdmissibleSet) -> tuple[float, float]:
    """Uniform bounds ``(M, M1)`` on ``|K(zeta)|`` and ``|grad K(zeta)|`` over admissible controls.

    ``M1`` uses the Frobenius norm of the Hessian of ``G_R`` obtained by central
    differences of the gradient stencil.
    """
    grid = kernel.grid
    vol = grid.cell_volume
    gs = kernel.grad_stencil
    M = aset.M0 * float(np.sum(np.sqrt(np.sum(gs**2, axis=0)))) * vol
    hess_sq = np.zeros(gs.shape[1:])
    for i in range(grid.d):
        for j in range(grid.d):
            hess_sq += np.gradient(gs[i], grid.dx, axis=j) ** 2
    M1 = aset.M0 * float(np.sum(np.sqrt(hess_sq))) * vol
    return M, M1
