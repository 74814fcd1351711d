import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpcontrol.errors import ConfigurationError, GridMismatch
from fpcontrol.grid import (
    Grid,
    boundary_mass,
    divergence_upwind,
    face_average,
    gradient,
    integrate,
    laplacian_matrix,
    laplacian_noflux,
    read_field_csv,
    upwind_matrix,
    write_field_csv,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_geometry():
    g = Grid(2, 3.0, 6)
    assert g.dx == pytest.approx(1.0)
    assert g.cell_volume == pytest.approx(1.0)
    assert g.shape == (6, 6) and g.size == 36
    np.testing.assert_allclose(g.centers, [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])
    assert g.coords.shape == (2, 6, 6)


@pytest.mark.parametrize("kwargs", [dict(d=0, L=1, n=8), dict(d=4, L=1, n=8), dict(d=1, L=1, n=3), dict(d=1, L=0, n=8)])
def test_invalid_grids(kwargs):
    with pytest.raises(ConfigurationError):
        Grid(**kwargs)


def test_integrate_examples():
    g = Grid(1, 2.0, 8)
    assert integrate(g, np.ones(8)) == pytest.approx(4.0)
    assert integrate(g, np.zeros(8)) == 0.0


def test_check_field_mismatch():
    with pytest.raises(GridMismatch):
        Grid(1, 1.0, 8).check_field(np.zeros(9))


def test_gradient_examples():
    g = Grid(1, 2.0, 8)  # dx = 0.5, centers at +-0.25, +-0.75, ...
    x = g.coords[0]
    np.testing.assert_allclose(gradient(g, 3 * x)[0], 3.0)
    np.testing.assert_allclose(gradient(g, np.full(8, 4.2)), 0.0)
    # central difference of x^2 at the cell centered on x = 1 ... grid with a center at 1
    h = Grid(1, 2.25, 9)
    gx = gradient(h, h.coords[0] ** 2)[0]
    i = int(np.argmin(np.abs(h.centers - 1.0)))
    assert h.centers[i] == pytest.approx(1.0)
    assert gx[i] == pytest.approx(2.0)


def test_gradient_linear_2d_interior_exact():
    g = Grid(2, 1.0, 8)
    f = 2.0 * g.coords[0] - 0.5 * g.coords[1]
    gr = gradient(g, f)
    np.testing.assert_allclose(gr[0], 2.0, atol=1e-12)
    np.testing.assert_allclose(gr[1], -0.5, atol=1e-12)


def test_laplacian_examples():
    g = Grid(1, 2.0, 16)
    np.testing.assert_allclose(laplacian_noflux(g, np.full(16, 3.0)), 0.0)
    lap = laplacian_noflux(g, g.coords[0] ** 2)
    np.testing.assert_allclose(lap[1:-1], 2.0, rtol=1e-12)


def test_laplacian_2d_quadratic():
    g = Grid(2, 1.0, 10)
    lap = laplacian_noflux(g, g.coords[0] ** 2 + g.coords[1] ** 2)
    np.testing.assert_allclose(lap[1:-1, 1:-1], 4.0, rtol=1e-12)


def test_divergence_trivial():
    g = Grid(1, 1.0, 8)
    rng = np.random.default_rng(0)
    F = rng.standard_normal((1, 8))
    np.testing.assert_array_equal(divergence_upwind(g, F, np.zeros(8)), 0.0)
    np.testing.assert_array_equal(divergence_upwind(g, np.zeros((1, 8)), rng.random(8)), 0.0)


def _upwind_oracle_1d(F, s, dx):
    # independent loop implementation: face velocity = mean, donor by sign, zero flux at the ends
    n = len(s)
    out = np.zeros(n)
    for j in range(n - 1):
        a = 0.5 * (F[j] + F[j + 1])
        flux = a * (s[j] if a >= 0 else s[j + 1])
        out[j] += flux / dx
        out[j + 1] -= flux / dx
    return out


@settings(max_examples=50, deadline=None)
@given(arrays(float, 12, elements=finite), arrays(float, 12, elements=finite))
def test_divergence_matches_loop_oracle_and_conserves(F, s):
    g = Grid(1, 3.0, 12)
    out = divergence_upwind(g, F[None], s)
    np.testing.assert_allclose(out, _upwind_oracle_1d(F, s, g.dx), atol=1e-10)
    assert abs(integrate(g, out)) <= 1e-12 * max(np.abs(s).max(), 1.0) * max(np.abs(F).max(), 1.0)
    np.testing.assert_allclose(upwind_matrix(g, F[None]) @ s, out, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (6, 7), elements=finite), arrays(float, (2, 6, 7), elements=finite),
       arrays(float, (6, 7), elements=finite))
def test_conservation_2d(f, F, s):
    g = Grid(2, 1.0, 7)
    f = np.resize(f, g.shape)
    s = np.resize(s, g.shape)
    F = np.resize(F, (2,) + g.shape)
    scale = max(np.abs(f).max(), 1.0)
    assert abs(integrate(g, laplacian_noflux(g, f))) <= 1e-12 * scale / g.dx**2
    div = divergence_upwind(g, F, s)
    assert abs(integrate(g, div)) <= 1e-12 * max(np.abs(s).max(), 1.0) * max(np.abs(F).max(), 1.0) / g.dx


def test_linearity():
    g = Grid(2, 1.0, 9)
    rng = np.random.default_rng(1)
    f1, f2 = rng.standard_normal((2,) + g.shape)
    a, b = 0.7, -1.3
    np.testing.assert_allclose(laplacian_noflux(g, a * f1 + b * f2),
                               a * laplacian_noflux(g, f1) + b * laplacian_noflux(g, f2), atol=1e-10)
    np.testing.assert_allclose(gradient(g, a * f1 + b * f2), a * gradient(g, f1) + b * gradient(g, f2), atol=1e-12)
    # upwinding is linear in s for a fixed velocity
    F = rng.standard_normal((2,) + g.shape)
    np.testing.assert_allclose(divergence_upwind(g, F, a * f1 + b * f2),
                               a * divergence_upwind(g, F, f1) + b * divergence_upwind(g, F, f2), atol=1e-10)


def test_laplacian_matrix_matches_operator():
    g = Grid(2, 1.0, 6)
    f = np.random.default_rng(2).standard_normal(g.shape)
    np.testing.assert_allclose(laplacian_matrix(g) @ f.ravel(), laplacian_noflux(g, f).ravel(), atol=1e-10)


def test_face_average():
    g = Grid(1, 1.0, 4)
    np.testing.assert_allclose(face_average(g, np.array([[0.0, 2.0, 4.0, 8.0]]), 0), [1.0, 3.0, 6.0])


def test_boundary_mass():
    g = Grid(1, 1.0, 40)
    rho = np.zeros(40)
    rho[20] = 1.0
    assert boundary_mass(g, rho) == 0.0
    rho[0] = 1.0
    assert boundary_mass(g, rho) == pytest.approx(g.dx)


def test_csv_roundtrip(tmp_path):
    g = Grid(2, 1.5, 5)
    f = np.random.default_rng(3).standard_normal(g.shape)
    path = write_field_csv(tmp_path / "f.csv", g, f, "rho")
    g2, f2 = read_field_csv(path)
    assert g2.same_as(g)
    np.testing.assert_array_equal(f2, f)
    with pytest.raises(GridMismatch):
        read_field_csv(path, Grid(2, 1.5, 6))
