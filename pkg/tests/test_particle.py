import numpy as np
import pytest

from fpcontrol.control import make_kernel
from fpcontrol.errors import ConfigurationError, ParticleEscape
from fpcontrol.fp import solve_forward
from fpcontrol.grid import Grid, integrate
from fpcontrol.model import ModelFunctions, builtin_model, constant_field, gaussian_density, make_cost
from fpcontrol.particle import bootstrap_density_bound, estimate_density, mc_cost, simulate

from _scenarios import repeller_scenario


def _heat_setup(n=256, N=32):
    g = Grid(1, 6.0, n)
    k = make_kernel(1.0, g)
    m = builtin_model("linear")
    rho0 = gaussian_density([0.4], 0.5)
    traj = solve_forward(rho0, np.zeros(g.shape), N, 0.5, m, k)
    return g, k, m, rho0, traj


def test_heat_statistics():
    g, k, m, rho0, traj = _heat_setup()
    ens = simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=20000, steps=32, seed=11)
    x = ens.positions[-1, :, 0]
    target_var = 0.25 + 2 * 0.5
    se_var = target_var * np.sqrt(2.0 / (x.size - 1))
    assert abs(x.var(ddof=1) - target_var) <= 3 * se_var
    assert abs(x.mean() - 0.4) <= 3 * np.sqrt(target_var / x.size)


def test_no_noise_no_drift_is_stationary():
    g, k, m, rho0, traj = _heat_setup(n=64, N=4)
    frozen = ModelFunctions(**{**m.__dict__, "psi": lambda r: np.zeros_like(np.asarray(r, float))})
    ens = simulate(rho0, np.zeros(g.shape), k, frozen, "frozen", traj, count=1, steps=10, seed=0)
    np.testing.assert_array_equal(ens.positions, np.broadcast_to(ens.positions[0], ens.positions.shape))


def test_determinism_and_thread_independence():
    g, k, m, rho0, traj = _heat_setup(n=64, N=8)
    a = simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=5000, steps=8, seed=3)
    b = simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=5000, steps=8, seed=3, workers=3, chunk=700)
    c = simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=5000, steps=8, seed=4)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_mode_validation():
    g, k, m, rho0, traj = _heat_setup(n=64, N=4)
    with pytest.raises(ConfigurationError):
        simulate(rho0, np.zeros(g.shape), k, m, "frozen", None, count=10)
    with pytest.raises(ConfigurationError):
        simulate(rho0, np.zeros(g.shape), k, m, "mixed", traj, count=10)


def test_escape_is_reported():
    g = Grid(1, 1.0, 32)
    k = make_kernel(0.2, g)
    m = builtin_model("linear")
    rho0 = gaussian_density([0.0], 0.3)
    traj = solve_forward(rho0, np.zeros(g.shape), 4, 2.0, m, k)
    with pytest.raises(ParticleEscape):
        simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=2000, steps=20, seed=0)


def test_density_estimate_mass():
    g = Grid(1, 3.0, 60)
    point = np.zeros((500, 1)) + 0.05
    est = estimate_density(point, g)
    assert integrate(g, est.field) == pytest.approx(1.0, abs=1e-12)
    assert est.field.argmax() == np.argmin(np.abs(g.centers - 0.05))
    rng = np.random.default_rng(0)
    for _ in range(5):
        est = estimate_density(rng.normal(0, 0.7, (1000, 1)), g)
        assert abs(integrate(g, est.field) - 1.0) <= 1e-12
        assert est.field.min() >= 0
    with pytest.raises(ConfigurationError):
        estimate_density(point, g, bandwidth=0.0)


def test_mc_cost_trivial_cases():
    g, k, m, rho0, traj = _heat_setup(n=64, N=8)
    ens = simulate(rho0, np.zeros(g.shape), k, m, "frozen", traj, count=300, steps=8, seed=1)
    zeta = np.where(g.radius <= 1.0, 0.5, 0.0)
    q_only = make_cost(constant_field(0.0), constant_field(0.0), 1.0, c_Q=2.0)
    est, se = mc_cost(ens, q_only, zeta)
    assert est == pytest.approx(np.sum(np.where(g.radius <= 1.0, 0.25, 0.0)) * g.dx, rel=1e-14)
    assert se == 0.0
    ones = make_cost(constant_field(1.0), constant_field(0.0), 1.0)
    est, se = mc_cost(ens, ones, np.zeros(g.shape))
    assert est == pytest.approx(0.5, rel=1e-14) and se == 0.0


def test_interacting_approaches_frozen():
    sc = repeller_scenario(n=256, N=32)
    zeta = sc.project(np.full(sc.grid.shape, 1.5))
    traj = sc.forward(zeta)
    dists = []
    for count in (1000, 10000, 100000):
        inter = simulate(sc.rho0, zeta, sc.kernel, sc.model, "interacting", None, count=count, steps=32, T=sc.T, seed=5)
        froz = simulate(sc.rho0, zeta, sc.kernel, sc.model, "frozen", traj, count=count, steps=32, seed=5)
        diff = estimate_density(inter).field - estimate_density(froz).field
        dists.append(np.sum(np.abs(diff)) * sc.grid.dx)
    assert dists[0] > dists[1] > dists[2]


def test_bootstrap_bound_on_frozen_ensemble():
    sc = repeller_scenario()
    zeta = sc.project(np.full(sc.grid.shape, 1.0))
    traj = sc.forward(zeta)
    ens = simulate(sc.rho0, zeta, sc.kernel, sc.model, "frozen", traj, count=50000, steps=64, seed=2)
    out = bootstrap_density_bound(ens, traj.final, replicates=10, seed=2)
    assert out["passed"] and out["statistical"] > 0 and out["bias"] > 0


@pytest.mark.slow
def test_weak_error_decreases_with_dt():
    sc = repeller_scenario(n=512, N=256)
    zeta = np.where(sc.aset.mask(sc.grid) & (sc.grid.coords[0] > -0.4) & (sc.grid.coords[0] < 1.0), 2.0, 0.0)
    traj = sc.forward(zeta)
    x, vol = sc.grid.centers, sc.grid.dx
    mean = np.sum(x * traj.final) * vol
    var = np.sum((x - mean) ** 2 * traj.final) * vol
    errors = []
    for steps in (8, 16, 32):
        pooled = np.concatenate([simulate(sc.rho0, zeta, sc.kernel, sc.model, "frozen", traj, count=400000,
                                          steps=steps, seed=s).positions[-1, :, 0] for s in range(4)])
        errors.append(abs(pooled.var() - var))
    assert errors[0] > errors[1] > errors[2]
