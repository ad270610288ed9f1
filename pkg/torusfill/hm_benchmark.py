"""
Horowitz-Myers Benchmark on R^2 x T^(n-2)

    g = V(r)^-1 dr^2 + V(r) dxi^2 + r^2 (flat T^(n-2)),   V(r) = r^2 - r0^n r^(2-n)

The xi-period 4 pi / (n r0) closes the (r, xi) plane smoothly at the tip
r = r0. The boundary {r = R} is a flat torus with constant mean curvature,
and its data nearly saturate the fill-in bound 1/2 (4 pi / (n sigma))^n as R
grows. The metric is certified here by the fd curvature oracle before the
sweep trusts it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .curvature_oracle import FDCurvature, MetricSample, fd_scalar_curvature
from .errors import DomainError
from .lattice_torus import FlatTorusMetric, make_flat_metric, make_grid, winding_systole

logger = logging.getLogger(__name__)

DEFAULT_RADII = (5.0, 10.0, 20.0, 40.0, 80.0)
HM_SWEEP_COLUMNS = ("R", "H", "sigma", "lhs", "rhs", "ratio")


@dataclass(frozen=True)
class HMModel:
    """
    Attributes:
        n: dimension (>= 3)
        r0: tip radius
        torus_circumferences: n-2 coordinate circumferences of the flat torus
            factor (boundary lengths are R times these); default twice the
            xi-period so the winding circle is the systole
    """
    n: int
    r0: float = 1.0
    torus_circumferences: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.n < 3:
            raise DomainError(f"Dimension n must be at least 3, got {self.n}")
        if self.r0 <= 0.0:
            raise DomainError(f"r0 must be positive, got {self.r0}")
        circ = tuple(float(c) for c in self.torus_circumferences)
        if not circ:
            circ = tuple([2.0 * self.xi_period] * (self.n - 2))
        if len(circ) != self.n - 2 or min(circ) <= 0.0:
            raise DomainError(f"Need {self.n - 2} positive circumferences, got {circ}")
        object.__setattr__(self, "torus_circumferences", circ)

    @property
    def xi_period(self) -> float:
        """4 pi / V'(r0) = 4 pi / (n r0)."""
        return 4.0 * math.pi / (self.n * self.r0)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "n": self.n,
            "r0": self.r0,
            "xi_period": self.xi_period,
            "torus_circumferences": list(self.torus_circumferences),
        }


def _check_radius(model: HMModel, r, strict: bool = False) -> None:
    r_min = float(np.min(r))
    if r_min < model.r0 or (strict and r_min <= model.r0):
        raise DomainError(f"Radius {r_min:.6g} below the tip r0 = {model.r0:.6g}")


def hm_potential(model: HMModel, r):
    """V(r) = r^2 - r0^n r^(2-n)."""
    _check_radius(model, r)
    return r ** 2 - model.r0 ** model.n * r ** (2 - model.n)


def hm_potential_prime(model: HMModel, r):
    """V'(r) = 2r + (n-2) r0^n r^(1-n)."""
    _check_radius(model, r)
    return 2.0 * r + (model.n - 2) * model.r0 ** model.n * r ** (1 - model.n)


def hm_boundary_mean_curvature(model: HMModel, R: float) -> float:
    """
    Mean curvature of {r = R} for the outward normal sqrt(V) d/dr.

    H = sqrt(V) d/dr log(sqrt(V) r^(n-2)) = sqrt(V) (V'/(2V) + (n-2)/R)
    """
    _check_radius(model, R, strict=True)
    V = hm_potential(model, R)
    return math.sqrt(V) * (hm_potential_prime(model, R) / (2.0 * V) + (model.n - 2) / R)


def fd_area_variation_mean_curvature(model: HMModel, R: float, h: float = 1e-4) -> float:
    """H from the centred first variation of the area density sqrt(V) r^(n-2)."""
    _check_radius(model, R - h, strict=True)

    def log_area(r: float) -> float:
        return 0.5 * math.log(hm_potential(model, r)) + (model.n - 2) * math.log(r)

    return math.sqrt(hm_potential(model, R)) * (log_area(R + h) - log_area(R - h)) / (2.0 * h)


def hm_boundary_gram(model: HMModel, R: float) -> np.ndarray:
    """Induced flat boundary Gram diag(V(R) xi^2, R^2 c_i^2) in unit-cube coordinates."""
    _check_radius(model, R, strict=True)
    diag = [hm_potential(model, R) * model.xi_period ** 2]
    diag += [R ** 2 * c ** 2 for c in model.torus_circumferences]
    return np.diag(diag)


def hm_boundary_metric(model: HMModel, R: float) -> FlatTorusMetric:
    return make_flat_metric(hm_boundary_gram(model, R))


@dataclass(frozen=True)
class SharpnessRow:
    R: float
    H: float
    sigma: float
    lhs: float
    rhs: float
    ratio: float

    def csv_row(self) -> Tuple[float, ...]:
        return (self.R, self.H, self.sigma, self.lhs, self.rhs, self.ratio)

    def to_dict(self) -> Dict[str, float]:
        """Convert to dictionary for JSON serialization."""
        return dict(zip(HM_SWEEP_COLUMNS, self.csv_row()))


def hm_sharpness(model: HMModel, R: float) -> SharpnessRow:
    """Both sides of the fill-in bound on the boundary {r = R}."""
    H = hm_boundary_mean_curvature(model, R)
    sigma = winding_systole(hm_boundary_metric(model, R))
    winding_length = math.sqrt(hm_potential(model, R)) * model.xi_period
    if sigma < winding_length * (1.0 - 1e-12):
        logger.warning(
            f"[HM] Systole {sigma:.6g} shorter than the xi-circle {winding_length:.6g} at R={R:.4g}; "
            f"torus circumferences too small"
        )
    lhs = H - (model.n - 1)
    rhs = 0.5 * (4.0 * math.pi / (model.n * sigma)) ** model.n
    return SharpnessRow(R=R, H=H, sigma=sigma, lhs=lhs, rhs=rhs, ratio=lhs / rhs)


def hm_sharpness_ratio(model: HMModel, R: float) -> float:
    """(H(R) - (n-1)) / (1/2 (4 pi / (n sigma(R)))^n)."""
    return hm_sharpness(model, R).ratio


def hm_sweep(model: HMModel, radii: Sequence[float] = DEFAULT_RADII) -> List[SharpnessRow]:
    rows = [hm_sharpness(model, float(R)) for R in radii]
    for row in rows:
        logger.info(f"[HM] R={row.R:g}: H={row.H:.10g} sigma={row.sigma:.8g} ratio={row.ratio:.8f}")
    return rows


# =============================================================================
# Curvature certification
# =============================================================================

def hm_sample_metric(
    model: HMModel,
    r_range: Tuple[float, float],
    resolutions: Tuple[int, int],
) -> MetricSample:
    """
    Sample of the HM metric in (xi, theta_1, ..., r) coordinates.

    Torus coordinates are unit-cube coordinates (xi = xi_period x_0,
    theta_i = c_i x_i), r runs over ``resolutions[1]`` uniform points.

    Raises:
        DomainError: r_range touches or crosses the tip
    """
    r_lo, r_hi = r_range
    if r_lo <= model.r0 or r_hi <= r_lo:
        raise DomainError(f"r_range {r_range} must lie in ({model.r0}, inf) and be increasing")
    torus_res, radial_res = resolutions
    d = model.n - 1
    boundary = make_flat_metric(np.eye(d))
    grid = make_grid(boundary, torus_res)
    r = np.linspace(r_lo, r_hi, radial_res)
    V = hm_potential(model, r)

    comps = np.zeros(tuple(grid.resolution) + (r.size, d + 1, d + 1))
    comps[..., 0, 0] = V * model.xi_period ** 2
    for i, c in enumerate(model.torus_circumferences, start=1):
        comps[..., i, i] = r ** 2 * c ** 2
    comps[..., d, d] = 1.0 / V
    return MetricSample(kind="general_diagonal_block", grid=grid, transverse=r, components=comps)


def certify_hm_curvature(
    model: HMModel,
    r_range: Tuple[float, float] = (2.0, 4.0),
    resolutions: Tuple[int, int] = (8, 33),
) -> FDCurvature:
    """fd scalar curvature of the HM sample at its middle radius (should be -n(n-1))."""
    sample = hm_sample_metric(model, r_range, resolutions)
    node = (0,) * sample.grid.dim + (sample.transverse.size // 2,)
    result = fd_scalar_curvature(sample, node)
    target = -model.n * (model.n - 1)
    logger.info(
        f"[HM] fd R = {result.value:.8g} (target {target}, error estimate {result.error_estimate:.2e}, "
        f"order {result.observed_order:.2f})"
    )
    return result
