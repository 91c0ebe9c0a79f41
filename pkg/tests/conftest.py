import numpy as np
import pytest

from qsmp import families, paths


@pytest.fixture(scope="session")
def exp_utility_spec():
    return families.build_exponential_utility()


@pytest.fixture(scope="session")
def lq_spec():
    return families.build_linear_quadratic()


@pytest.fixture(scope="session")
def tanh_spec():
    return families.build_bounded_tanh()


@pytest.fixture(scope="session")
def small_grid():
    return paths.TimeGrid(50, 1.0)


@pytest.fixture(scope="session")
def small_noise(small_grid):
    return paths.simulate_brownian(small_grid, 4000, 1, seed=42)


def gauss_hermite_log_moment(gamma: float = 1.0, mean: float = 0.0, var: float = 1.0) -> float:
    """ln E[exp(gamma * tanh(X))] / gamma for X ~ Normal(mean, var), by
    200-point Gauss-Hermite quadrature (independent of the solvers)."""
    nodes, weights = np.polynomial.hermite.hermgauss(200)
    samples = mean + np.sqrt(2.0 * var) * nodes
    value = np.sum(weights * np.exp(gamma * np.tanh(samples))) / np.sqrt(np.pi)
    return float(np.log(value) / gamma)
