"""Shared fixtures: metrics, grids and cached solver runs."""

import math

import numpy as np
import pytest

from torusfill.flow_solver import SolverControls, evolve_to, evolve_to_convergence, init_state
from torusfill.lattice_torus import make_flat_metric, make_grid
from torusfill.spectral_field import constant_field, field_from_function


@pytest.fixture
def unit_metric():
    return make_flat_metric(np.eye(2))


@pytest.fixture
def skew_metric():
    return make_flat_metric([[2.0, 0.5], [0.5, 1.0]])


@pytest.fixture
def grid16(unit_metric):
    return make_grid(unit_metric, 16)


def homogeneous_state(value=2.0, resolution=8, n=3, rho0=1.0):
    grid = make_grid(make_flat_metric(np.eye(n - 1)), resolution)
    return init_state(constant_field(grid, value), rho0, n)


def cosine_state(amplitude=0.3, resolution=16, scale=16.0, n=3):
    """u0 = 1 + amplitude cos(2 pi x0) on the torus with Gram scale * I."""
    grid = make_grid(make_flat_metric(scale * np.eye(n - 1)), resolution)
    u0 = field_from_function(grid, lambda *x: 1.0 + amplitude * np.cos(2.0 * math.pi * x[0]))
    return init_state(u0, 1.0, n)


@pytest.fixture(scope="session")
def homogeneous_trace():
    """u0 = 2, n = 3, rho0 = 1, run until psi settles."""
    return evolve_to_convergence(homogeneous_state(), 100.0)


@pytest.fixture(scope="session")
def homogeneous_run_to_100():
    return evolve_to(homogeneous_state(), 100.0)


@pytest.fixture(scope="session")
def cosine_trace():
    """Inhomogeneous run to psi convergence (amplitude 0.3, 16^2 grid)."""
    return evolve_to_convergence(cosine_state(), 100.0, SolverControls())
