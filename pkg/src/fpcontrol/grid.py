"""Uniform cell-centered grid on the box [-L, L]^d and conservative operators.

Fields are plain numpy arrays: a scalar field has shape ``grid.shape`` and a
vector field has shape ``(d, *grid.shape)``.  Fluxes live on the interior
faces; boundary faces carry zero flux, so every divergence-form operator here
sums to zero over the grid (discrete mass is conserved exactly).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, GridMismatch

__all__ = [
    "Grid",
    "integrate",
    "gradient",
    "face_average",
    "face_gradient",
    "divergence_upwind",
    "laplacian_noflux",
    "laplacian_matrix",
    "upwind_matrix",
    "boundary_mass",
    "write_field_csv",
    "read_field_csv",
]


@dataclass(frozen=True)
class Grid:
    """Tensor grid with ``n`` cells per axis on ``[-L, L]^d``."""

    d: int
    L: float
    n: int
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if not 1 <= self.d <= 3:
            raise ConfigurationError(f"dimension must be 1..3, got {self.d}")
        if self.n < 4:
            raise ConfigurationError(f"need at least 4 cells per axis, got {self.n}")
        if not self.L > 0:
            raise ConfigurationError(f"box half-width must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    @cached_property
    def centers(self) -> np.ndarray:
        """1-D cell-center coordinates along any axis."""
        return -self.L + (np.arange(self.n) + 0.5) * self.dx

    @cached_property
    def coords(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(d, *shape)``."""
        mesh = np.meshgrid(*([self.centers] * self.d), indexing="ij")
        return np.stack(mesh)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coords**2, axis=0))

    def faces(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices ``(left, right)`` of the two cells sharing each interior face."""
        key = ("faces", axis)
        if key not in self._cache:
            idx = np.arange(self.size).reshape(self.shape)
            left = np.take(idx, np.arange(self.n - 1), axis=axis).ravel()
            right = np.take(idx, np.arange(1, self.n), axis=axis).ravel()
            self._cache[key] = (left, right)
        return self._cache[key]

    def same_as(self, other: "Grid") -> bool:
        return (self.d, self.n) == (other.d, other.n) and np.isclose(self.L, other.L, rtol=0, atol=1e-14)

    def check_field(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise GridMismatch(f"field shape {f.shape} does not match grid {self.shape}")
        return f


def integrate(grid: Grid, f: np.ndarray) -> float:
    """Midpoint quadrature: sum of cell values times the cell volume."""
    return float(np.sum(f) * grid.cell_volume)


def gradient(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Cell-centered gradient: central differences inside, one-sided at the box edge."""
    f = grid.check_field(f)
    return np.stack([np.gradient(f, grid.dx, axis=k, edge_order=1) for k in range(grid.d)])


def face_average(grid: Grid, F: np.ndarray, axis: int) -> np.ndarray:
    """Arithmetic mean of component ``axis`` of ``F`` on the interior faces."""
    left, right = grid.faces(axis)
    comp = np.asarray(F[axis], dtype=float).ravel()
    return 0.5 * (comp[left] + comp[right])


def face_gradient(grid: Grid, p: np.ndarray, axis: int) -> np.ndarray:
    """Two-point difference of ``p`` across each interior face normal to ``axis``."""
    left, right = grid.faces(axis)
    flat = np.asarray(p, dtype=float).ravel()
    return (flat[right] - flat[left]) / grid.dx


def _flux_divergence(grid: Grid, axis: int, flux: np.ndarray) -> np.ndarray:
    left, right = grid.faces(axis)
    out = np.bincount(left, weights=flux, minlength=grid.size)
    out -= np.bincount(right, weights=flux, minlength=grid.size)
    return out / grid.dx


def upwind_cells(grid: Grid, direction: np.ndarray, axis: int) -> np.ndarray:
    """Donor cell of each face: left cell where the face velocity is >= 0, else right."""
    left, right = grid.faces(axis)
    return np.where(direction >= 0.0, left, right)


def divergence_upwind(
    grid: Grid, F: np.ndarray, s: np.ndarray, direction: np.ndarray | None = None
) -> np.ndarray:
    """Donor-cell discretization of div(F s) with zero flux through the box boundary.

    ``direction`` (a vector field) selects the donor cell when given; by default
    the sign of ``F`` itself does.  Passing a separate direction is what the
    linearized scheme needs: the perturbation of the velocity is transported
    with the donor cells of the base velocity.
    """
    s = grid.check_field(s).ravel()
    out = np.zeros(grid.size)
    for k in range(grid.d):
        a = face_average(grid, F, k)
        a_dir = a if direction is None else face_average(grid, direction, k)
        donor = upwind_cells(grid, a_dir, k)
        out += _flux_divergence(grid, k, a * s[donor])
    return out.reshape(grid.shape)


def laplacian_noflux(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Standard (2d+1)-point Laplacian with homogeneous Neumann closure."""
    f = grid.check_field(f)
    out = np.zeros(grid.size)
    for k in range(grid.d):
        out += _flux_divergence(grid, k, face_gradient(grid, f, k))
    return out.reshape(grid.shape)


def laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    """Sparse matrix of :func:`laplacian_noflux` acting on flattened fields."""
    key = ("laplacian",)
    if key not in grid._cache:
        rows, cols, vals = [], [], []
        w = 1.0 / grid.dx**2
        for k in range(grid.d):
            left, right = grid.faces(k)
            rows += [left, left, right, right]
            cols += [right, left, right, left]
            vals += [np.full(left.size, w), np.full(left.size, -w), np.full(left.size, -w), np.full(left.size, w)]
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.size, grid.size)
        )
        grid._cache[key] = mat.tocsr()
    return grid._cache[key]


def upwind_matrix(grid: Grid, F: np.ndarray, direction: np.ndarray | None = None) -> sp.csr_matrix:
    """Sparse matrix of ``s -> divergence_upwind(grid, F, s, direction)``."""
    rows, cols, vals = [], [], []
    for k in range(grid.d):
        left, right = grid.faces(k)
        a = face_average(grid, F, k)
        a_dir = a if direction is None else face_average(grid, direction, k)
        donor = upwind_cells(grid, a_dir, k)
        rows += [left, right]
        cols += [donor, donor]
        vals += [a / grid.dx, -a / grid.dx]
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.size, grid.size)
    )
    return mat.tocsr()


def boundary_mass(grid: Grid, rho: np.ndarray, width: int = 10) -> float:
    """Mass held by the outer ``width`` layers of cells."""
    inner = np.ones(grid.shape, dtype=bool)
    w = min(width, grid.n // 2)
    core = tuple(slice(w, grid.n - w) for _ in range(grid.d))
    inner[core] = False
    return float(np.sum(np.abs(rho[inner])) * grid.cell_volume)


def write_field_csv(path, grid: Grid, values: np.ndarray, name: str = "value") -> Path:
    """One row per cell: integer index per axis, coordinates, value."""
    values = grid.check_field(values)
    path = Path(path)
    idx = np.indices(grid.shape).reshape(grid.d, -1)
    xs = grid.coords.reshape(grid.d, -1)
    flat = values.ravel()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{k}" for k in range(grid.d)] + [f"x{k}" for k in range(grid.d)] + [name])
        for c in range(grid.size):
            writer.writerow(
                [int(i) for i in idx[:, c]] + [repr(float(x)) for x in xs[:, c]] + [repr(float(flat[c]))]
            )
    return path


def read_field_csv(path, grid: Grid | None = None) -> tuple[Grid, np.ndarray]:
    """Inverse of :func:`write_field_csv`; infers the grid when none is given."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader]
    d = sum(1 for h in header if h.startswith("i"))
    data = np.array([[float(v) for v in row] for row in rows])
    idx = data[:, :d].astype(int)
    n = int(idx.max()) + 1
    if grid is None:
        x0 = data[:, d : 2 * d].min()
        dx_half = (data[:, d : 2 * d].max() - x0) / (n - 1) / 2.0
        grid = Grid(d=d, L=float(-(x0 - dx_half)), n=n)
    elif grid.d != d or grid.n != n:
        raise GridMismatch(f"CSV holds a {d}-d grid with {n} cells per axis, expected {grid.d}-d with {grid.n}")
    values = np.zeros(grid.shape)
    values[tuple(idx.T)] = data[:, -1]
    return grid, values
