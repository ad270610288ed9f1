"""Tests for spectral operators on flat tori."""

import math

import numpy as np
import pytest

from torusfill.errors import NonZeroMean
from torusfill.lattice_torus import make_flat_metric, make_grid
from torusfill.spectral_field import (
    ScalarField,
    constant_field,
    dealias,
    field_from_function,
    gradient,
    gradient_norm_sq,
    hessian,
    inner_product,
    integrate,
    laplacian,
    mean,
    poisson_solve_zero_mean,
)

TWO_PI = 2.0 * math.pi


def cosine(grid, k=1, axis=0):
    return field_from_function(grid, lambda *x: np.cos(TWO_PI * k * x[axis]))


def random_zero_mean(grid, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(grid.resolution)
    return ScalarField(grid, values - values.mean())


class TestScalarField:
    """Field container."""

    def test_values_are_read_only(self, grid16):
        field = constant_field(grid16, 1.0)
        with pytest.raises(ValueError):
            field.values[0, 0] = 2.0

    def test_flat_values_reshape(self, grid16):
        field = cosine(grid16)
        again = ScalarField(grid16, field.flat_values())
        np.testing.assert_array_equal(again.values, field.values)


class TestLaplacian:
    """Symbol -4 pi^2 m^T G^-1 m."""

    def test_eigenfunction(self, grid16):
        field = cosine(grid16)
        np.testing.assert_allclose(laplacian(field).values, -4.0 * math.pi ** 2 * field.values, atol=1e-10)

    def test_skew_metric_uses_inverse_gram(self, skew_metric):
        grid = make_grid(skew_metric, 16)
        field = cosine(grid)
        g_inv = np.linalg.inv(skew_metric.gram)
        expected = -4.0 * math.pi ** 2 * g_inv[0, 0] * field.values
        np.testing.assert_allclose(laplacian(field).values, expected, atol=1e-10)

    def test_constant_is_harmonic(self, grid16):
        np.testing.assert_allclose(laplacian(constant_field(grid16, 3.0)).values, 0.0, atol=1e-9)

    def test_self_adjoint(self, skew_metric):
        grid = make_grid(skew_metric, 16)
        f, g = random_zero_mean(grid, 1), random_zero_mean(grid, 2)
        lhs = inner_product(laplacian(f), g)
        rhs = inner_product(f, laplacian(g))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_zero_integral(self, skew_metric):
        grid = make_grid(skew_metric, 16)
        lap = laplacian(random_zero_mean(grid, 3))
        assert abs(integrate(lap)) <= 1e-10 * lap.max_abs()


class TestPoisson:
    """Zero-mean inversion of the Laplacian."""

    def test_eigenfunction_inversion(self, grid16):
        f = poisson_solve_zero_mean(cosine(grid16))
        np.testing.assert_allclose(f.values, -cosine(grid16).values / (4.0 * math.pi ** 2), atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_residual_on_random_input(self, skew_metric, seed):
        grid = make_grid(skew_metric, 16)
        rhs = random_zero_mean(grid, seed)
        f = poisson_solve_zero_mean(rhs)
        assert abs(mean(f)) <= 1e-12
        np.testing.assert_allclose(laplacian(f).values, rhs.values, atol=1e-10)

    @pytest.mark.parametrize("resolution", [8, 15, 16])
    def test_inverts_laplacian_on_skew_metric(self, skew_metric, resolution):
        grid = make_grid(skew_metric, resolution)
        f = random_zero_mean(grid, 5)
        np.testing.assert_allclose(poisson_solve_zero_mean(laplacian(f)).values, f.values, atol=1e-10)

    def test_residual_with_nyquist_content(self):
        grid = make_grid(make_flat_metric([[2.0, 0.5], [0.5, 1.0]]), 16)
        checker = field_from_function(grid, lambda *x: np.cos(math.pi * 16 * x[0]) * np.cos(TWO_PI * 3 * x[1]))
        rhs = ScalarField(grid, checker.values + random_zero_mean(grid, 7).values)
        rhs = ScalarField(grid, rhs.values - rhs.values.mean())
        f = poisson_solve_zero_mean(rhs)
        assert np.max(np.abs(laplacian(f).values - rhs.values)) <= 1e-10

    def test_rejects_nonzero_mean(self, grid16):
        with pytest.raises(NonZeroMean):
            poisson_solve_zero_mean(constant_field(grid16, 1.0))


class TestDerivatives:
    """Gradient, Hessian and gradient norm."""

    def test_gradient_of_sine(self, grid16):
        field = field_from_function(grid16, lambda *x: np.sin(TWO_PI * x[1]))
        d0, d1 = gradient(field)
        np.testing.assert_allclose(d0.values, 0.0, atol=1e-12)
        np.testing.assert_allclose(d1.values, TWO_PI * np.cos(TWO_PI * grid16.coordinates()[1]), atol=1e-10)

    def test_hessian_trace_matches_laplacian(self, skew_metric):
        grid = make_grid(skew_metric, 16)
        field = field_from_function(grid, lambda *x: np.cos(TWO_PI * (x[0] + 2 * x[1])) + np.sin(TWO_PI * x[1]))
        hess = hessian(field)
        g_inv = np.linalg.inv(skew_metric.gram)
        trace = sum(g_inv[a, b] * hess[a][b].values for a in range(2) for b in range(2))
        np.testing.assert_allclose(trace, laplacian(field).values, atol=1e-9)

    def test_gradient_norm(self, skew_metric):
        grid = make_grid(skew_metric, 16)
        field = field_from_function(grid, lambda *x: np.sin(TWO_PI * x[0]))
        g_inv = np.linalg.inv(skew_metric.gram)
        expected = g_inv[0, 0] * (TWO_PI * np.cos(TWO_PI * grid.coordinates()[0])) ** 2
        np.testing.assert_allclose(gradient_norm_sq(field).values, expected, atol=1e-9)


class TestIntegration:
    """Periodic midpoint rule."""

    def test_constant(self, skew_metric):
        grid = make_grid(skew_metric, 8)
        assert integrate(constant_field(grid, 2.0)) == pytest.approx(2.0 * skew_metric.volume)
        assert mean(constant_field(grid, 2.0)) == pytest.approx(2.0)

    def test_trigonometric_polynomial_integrates_to_zero(self, grid16):
        assert abs(integrate(cosine(grid16, k=3))) <= 1e-14


class TestDealias:
    """2/3 rule."""

    def test_keeps_low_modes(self, grid16):
        np.testing.assert_allclose(dealias(cosine(grid16, k=5)).values, cosine(grid16, k=5).values, atol=1e-12)

    def test_drops_high_modes(self, grid16):
        np.testing.assert_allclose(dealias(cosine(grid16, k=6)).values, 0.0, atol=1e-12)
