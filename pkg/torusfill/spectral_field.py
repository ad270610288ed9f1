"""
Spectral Field: Periodic Scalar Fields on Flat Tori

Fields are samples on a uniform Grid. Because the metric is a constant Gram
matrix G, the Laplacian is diagonal in Fourier space:

    Fourier mode m  ->  -4 pi^2 m^T G^{-1} m

so Laplacian, Poisson inversion, gradients and Hessians are exact for
band-limited fields. Integrals use the periodic midpoint rule
(volume / node_count) * sum(values), which is exact for trigonometric
polynomials resolved by the grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from .errors import NonZeroMean
from .lattice_torus import Grid

logger = logging.getLogger(__name__)

# Zero-mean tolerance for Poisson right-hand sides (relative to max|rhs|)
ZERO_MEAN_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ScalarField:
    """
    Real periodic field sampled on a grid.

    Attributes:
        grid: the grid (and through it the flat metric)
        values: array of shape grid.resolution, read-only
    """
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.shape != self.grid.resolution:
            arr = arr.reshape(self.grid.resolution, order="F")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def flat_values(self) -> np.ndarray:
        """Values in node order (axis 0 fastest)."""
        return self.values.ravel(order="F")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def min(self) -> float:
        return float(np.min(self.values))

    def max(self) -> float:
        return float(np.max(self.values))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __repr__(self) -> str:
        return (
            f"ScalarField(resolution={self.grid.resolution}, "
            f"min={self.min():.6g}, max={self.max():.6g})"
        )


def constant_field(grid: Grid, value: float) -> ScalarField:
    return ScalarField(grid, np.full(grid.resolution, float(value)))


def field_from_function(grid: Grid, fn: Callable[..., np.ndarray]) -> ScalarField:
    """Sample fn(x_0, ..., x_{d-1}) on the grid (coordinates in [0,1))."""
    coords = grid.coordinates()
    values = np.broadcast_to(np.asarray(fn(*coords), dtype=float), grid.resolution)
    return ScalarField(grid, np.array(values))


# =============================================================================
# Spectral operators
# =============================================================================

class SpectralOperators:
    """
    Fourier symbols for one grid (rfftn layout: last axis halved).

    Attributes:
        modes: integer wavenumber arrays broadcastable to the spectral shape
        laplacian_symbol: -4 pi^2 m^T G^{-1} m
        dealias_mask: 2/3-rule mask (True = keep)
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        res = grid.resolution
        d = len(res)
        modes = []
        for a, n in enumerate(res):
            if a == d - 1:
                m = np.fft.rfftfreq(n, d=1.0 / n)
            else:
                m = np.fft.fftfreq(n, d=1.0 / n)
            shape = [1] * d
            shape[a] = m.size
            modes.append(m.reshape(shape))
        self.modes = modes
        self.spectral_shape = tuple(res[:-1]) + (res[-1] // 2 + 1,)

        nyquist = []
        for a, n in enumerate(res):
            nyquist.append((n % 2 == 0) & (np.abs(modes[a]) == n // 2))
        self._nyquist = nyquist

        # Cross terms drop the unpaired Nyquist mode so the symbol stays Hermitian
        g_inv = grid.metric.inverse
        symbol = np.zeros(self.spectral_shape)
        for a in range(d):
            for b in range(d):
                if a == b:
                    symbol = symbol + g_inv[a, a] * modes[a] ** 2
                else:
                    symbol = symbol + g_inv[a, b] * self._paired_modes(a) * self._paired_modes(b)
        self.laplacian_symbol = -4.0 * math.pi ** 2 * symbol
        self.max_eigenvalue = float(np.max(-self.laplacian_symbol))

        keep = np.ones(self.spectral_shape, dtype=bool)
        for a, n in enumerate(res):
            keep = keep & (np.abs(modes[a]) <= n / 3.0)
        self.dealias_mask = keep

    def _paired_modes(self, axis: int) -> np.ndarray:
        return np.where(self._nyquist[axis], 0.0, self.modes[axis])

    def derivative_symbol(self, axis: int) -> np.ndarray:
        """Symbol of d/dx_axis (Nyquist zeroed, the mode is not differentiable)."""
        sym = 2j * math.pi * self.modes[axis]
        return np.where(self._nyquist[axis], 0.0, sym)

    def second_derivative_symbol(self, a: int, b: int) -> np.ndarray:
        if a == b:
            return -4.0 * math.pi ** 2 * self.modes[a] ** 2 * np.ones(self.spectral_shape)
        return self.derivative_symbol(a) * self.derivative_symbol(b)

    def forward(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values, axes=tuple(range(self.grid.dim)))

    def inverse(self, coefficients: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(coefficients, s=self.grid.resolution, axes=tuple(range(self.grid.dim)))


_OPERATOR_CACHE: Dict[Tuple, SpectralOperators] = {}


def operators_for(grid: Grid) -> SpectralOperators:
    """Spectral operators for a grid, cached by (resolution, Gram)."""
    key = (grid.resolution, grid.metric.gram.tobytes())
    ops = _OPERATOR_CACHE.get(key)
    if ops is None:
        ops = SpectralOperators(grid)
        _OPERATOR_CACHE[key] = ops
    return ops


def apply_symbol(field: ScalarField, symbol: np.ndarray) -> ScalarField:
    ops = operators_for(field.grid)
    return field.with_values(ops.inverse(symbol * ops.forward(field.values)))


# =============================================================================
# Operations
# =============================================================================

def laplacian(field: ScalarField) -> ScalarField:
    """Delta_gamma of a field (constant-coefficient, spectral)."""
    return apply_symbol(field, operators_for(field.grid).laplacian_symbol)


def gradient(field: ScalarField) -> Tuple[ScalarField, ...]:
    """Coordinate partial derivatives (d/dx_0, ..., d/dx_{d-1})."""
    ops = operators_for(field.grid)
    coeffs = ops.forward(field.values)
    return tuple(
        field.with_values(ops.inverse(ops.derivative_symbol(a) * coeffs))
        for a in range(field.grid.dim)
    )


def hessian(field: ScalarField) -> Tuple[Tuple[ScalarField, ...], ...]:
    """Coordinate second derivatives d^2/dx_a dx_b (symmetric nested tuple)."""
    ops = operators_for(field.grid)
    coeffs = ops.forward(field.values)
    d = field.grid.dim
    rows = []
    for a in range(d):
        row = []
        for b in range(d):
            row.append(field.with_values(ops.inverse(ops.second_derivative_symbol(a, b) * coeffs)))
        rows.append(tuple(row))
    return tuple(rows)


def gradient_norm_sq(field: ScalarField) -> ScalarField:
    """|d field|^2_gamma = G^{ab} d_a field d_b field."""
    grads = gradient(field)
    g_inv = field.grid.metric.inverse
    total = np.zeros(field.grid.resolution)
    for a, ga in enumerate(grads):
        for b, gb in enumerate(grads):
            total = total + g_inv[a, b] * ga.values * gb.values
    return field.with_values(total)


def dealias(field: ScalarField) -> ScalarField:
    """Truncate to the 2/3-rule band."""
    return apply_symbol(field, operators_for(field.grid).dealias_mask.astype(float))


def poisson_solve_zero_mean(rhs: ScalarField) -> ScalarField:
    """
    Solve Delta_gamma f = rhs with mean(f) = 0.

    Raises:
        NonZeroMean: |mean(rhs)| > 1e-10 * max|rhs|
    """
    scale = rhs.max_abs()
    avg = mean(rhs)
    if abs(avg) > ZERO_MEAN_RTOL * scale:
        raise NonZeroMean(
            f"Poisson right-hand side has mean {avg:.3e} (max |rhs| = {scale:.3e})",
            details={"mean": avg, "max_abs": scale},
        )
    ops = operators_for(rhs.grid)
    coeffs = ops.forward(rhs.values)
    symbol = ops.laplacian_symbol.copy()
    zero = (slice(0, 1),) * rhs.grid.dim
    symbol[zero] = 1.0
    solution = coeffs / symbol
    solution[zero] = 0.0
    return rhs.with_values(ops.inverse(solution))


def integrate(field: ScalarField) -> float:
    """Integral against dvol_gamma (periodic midpoint rule)."""
    return field.grid.metric.volume / field.grid.node_count * float(np.sum(field.flat_values()))


def mean(field: ScalarField) -> float:
    """Average against dvol_gamma."""
    return integrate(field) / field.grid.metric.volume


def inner_product(f: ScalarField, g: ScalarField) -> float:
    """Integral of f * g against dvol_gamma."""
    return integrate(f.with_values(f.values * g.values))
