import numpy as np
import pytest

from fpcontrol.errors import ConfigurationError
from fpcontrol.grid import Grid, integrate
from fpcontrol.model import (
    InitialDensity,
    ModelFunctions,
    builtin_model,
    gaussian_density,
    gaussian_field,
    make_cost,
    mollified_box,
    project_density,
    validate_hypotheses,
)

R = np.linspace(-10, 10, 4001)


def test_linear_model_values():
    m = builtin_model("linear")
    np.testing.assert_allclose(m.beta_prime(R), 1.0)
    np.testing.assert_allclose(m.psi(R), 1.0)
    np.testing.assert_allclose(m.sigma(R), np.sqrt(2.0))


def test_rational_cubic_values():
    m = builtin_model("rational-cubic")
    assert float(m.beta(0.0)) == 0.0
    assert float(m.psi(0.0)) == 1.0
    assert float(m.beta(1.0)) == pytest.approx(1.25)


@pytest.mark.parametrize("name", ["linear", "rational-cubic"])
def test_derivatives_against_central_differences(name):
    m = builtin_model(name)
    eps = 1e-5
    fd = (m.beta(R + eps) - m.beta(R - eps)) / (2 * eps)
    np.testing.assert_allclose(m.beta_prime(R), fd, rtol=1e-6)
    fd_b = (m.b(R + eps) - m.b(R - eps)) / (2 * eps)
    np.testing.assert_allclose(m.b_prime(R), fd_b, atol=1e-8)
    fd_bs = (m.b_star(R + eps) - m.b_star(R - eps)) / (2 * eps)
    np.testing.assert_allclose(m.b_star_prime(R), fd_bs, atol=1e-8)
    np.testing.assert_array_equal(m.b_star(R), m.b(R) * R)
    nz = R != 0
    np.testing.assert_allclose(m.psi(R[nz]), m.beta(R[nz]) / R[nz], rtol=1e-12)
    assert abs(float(m.psi(1e-4)) - float(m.beta_prime(0.0))) < 1e-3


def test_unknown_model():
    with pytest.raises(ConfigurationError):
        builtin_model("cubic")
    with pytest.raises(ConfigurationError):
        builtin_model("linear", beta=1.0)


def test_linear_case_passes():
    g = Grid(1, 6.0, 64)
    cost = make_cost(gaussian_field([0.0], 1.0), gaussian_field([0.0], 1.0), 1.5)
    rep = validate_hypotheses(builtin_model("linear"), cost, gaussian_density([0.0], 0.5), grid=g)
    assert rep.passed, rep.failures()
    assert len(rep.checks) == 16


def test_negative_beta_fails():
    m = builtin_model("linear")
    bad = ModelFunctions(**{**m.__dict__, "beta": lambda r: -np.asarray(r, float),
                            "beta_prime": lambda r: -np.ones_like(np.asarray(r, float))})
    rep = validate_hypotheses(bad)
    assert not rep["beta'>=gamma0"].passed
    assert rep["beta'>=gamma0"].worst == pytest.approx(2.0)


def test_rational_cubic_derivative_range():
    # scan oracle: beta' - 1 = (3 s + s^2) / (2 (1 + s)^2), s = r^2, peaks at s = 3 with value 9/16
    s = np.linspace(0, 100, 200001)
    scan = (3 * s + s**2) / (2 * (1 + s) ** 2)
    assert scan.max() == pytest.approx(0.5625, abs=1e-9)
    m = builtin_model("rational-cubic")
    bp = m.beta_prime(R)
    assert bp.min() == pytest.approx(1.0)
    assert bp.max() == pytest.approx(1.5625, abs=1e-6)
    assert validate_hypotheses(m).passed
    # the tighter constant 1.13 is falsified by sampling
    rep = validate_hypotheses(builtin_model("rational-cubic", gamma1=1.13))
    assert not rep["beta'<=gamma1"].passed
    assert abs(abs(rep["beta'<=gamma1"].witness) - np.sqrt(3)) < 0.01


def test_nonfinite_is_reported_not_raised():
    m = builtin_model("linear")
    bad = ModelFunctions(**{**m.__dict__, "beta_prime": lambda r: np.where(np.asarray(r) == 0, np.nan, 1.0)})
    rep = validate_hypotheses(bad, r_range=(-1, 1), samples=101)
    chk = rep["beta'>=gamma0"]
    assert not chk.passed and chk.nonfinite


def test_bad_sampling_arguments():
    m = builtin_model("linear")
    with pytest.raises(ConfigurationError):
        validate_hypotheses(m, samples=1)
    with pytest.raises(ConfigurationError):
        validate_hypotheses(m, r_range=(1.0, 1.0))


def test_cost_checks():
    g = Grid(1, 4.0, 64)
    neg = make_cost(lambda x: -np.ones(np.shape(x)[1:]), gaussian_field([0.0], 1.0), 1.0)
    rep = validate_hypotheses(builtin_model("linear"), neg, grid=g)
    assert not rep["G>=0"].passed
    good = make_cost(mollified_box([-1.0], [1.0], 0.1), gaussian_field([0.0], 1.0), 1.0, c_Q=2.0)
    rep = validate_hypotheses(builtin_model("linear"), good, grid=g, z_max=3.0)
    assert rep.passed, rep.failures()
    leaky = make_cost(gaussian_field([0.0], 1.0), gaussian_field([0.0], 1.0), 1.0)
    leaky = type(leaky)(G=leaky.G, G_T=leaky.G_T, Q=lambda x, z: np.asarray(z, float) ** 2 * np.ones(np.shape(x)[1:]),
                        Q_z=leaky.Q_z, R0=1.0)
    assert not validate_hypotheses(builtin_model("linear"), leaky, grid=g)["Q=0 for |x|>R0"].passed
    concave = type(leaky)(G=leaky.G, G_T=leaky.G_T, Q=lambda x, z: np.sqrt(np.abs(z)) * np.ones(np.shape(x)[1:]),
                          Q_z=leaky.Q_z, R0=10.0)
    assert not validate_hypotheses(builtin_model("linear"), concave, grid=g)["Q convex in z"].passed


def test_initial_density_projection():
    g = Grid(1, 6.0, 128)
    rho = project_density(gaussian_density([0.2], 0.6), g)
    assert abs(integrate(g, rho) - 1.0) <= 1e-14
    with pytest.raises(ConfigurationError):
        project_density(InitialDensity(rho0=lambda x: np.ones(np.shape(x)[1:]), analytic_mass=2.0), g)
    rep = validate_hypotheses(builtin_model("linear"), rho0=InitialDensity(lambda x: -np.ones(np.shape(x)[1:])), grid=g)
    assert not rep["rho0>=0"].passed


def test_time_dependent_cost_flag():
    cost = make_cost(None, gaussian_field([0.0], 1.0), 1.0, G_t=lambda t, x: t * np.ones(np.shape(x)[1:]))
    assert cost.time_dependent
    assert float(cost.G(0.3, np.zeros((1, 1)))[0]) == pytest.approx(0.3)
