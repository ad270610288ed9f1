"""
Curvature Oracle: Independent Scalar Curvature of Sampled Metrics

Two routes to R:
- closed forms for the warped metric rho^2 gamma + u^2 rho^-2 drho^2 and the
  band metric v^2 dt^2 + gamma_t (spectral in x, exact)
- fd_scalar_curvature: Christoffel symbols and the Ricci contraction by finite
  differences of the sampled metric components, assumption-free

Samples live on (torus grid) x (transverse coordinate list). Coordinates are
(x_0, ..., x_{d-1}, s) with x in unit-cube coordinates (periodic) and s the
transverse coordinate (rho, t or r), which may be non-uniform.

The fd route works on a 5-point-per-axis patch around the node and repeats at
strides 1, 2 and 4; the spread between levels gives the error estimate and
the observed order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SingularMetric, StencilOutOfRange
from .flow_solver import (
    DEFAULT_CONTROLS,
    FlowState,
    SolverControls,
    measured_time_derivative,
    step,
    time_derivative,
)
from .lattice_torus import FlatTorusMetric, Grid, make_grid
from .spectral_field import ScalarField, laplacian

logger = logging.getLogger(__name__)

SAMPLE_KINDS = ("warped_radial", "band", "general_diagonal_block")
_PATCH = 5


@dataclass(frozen=True, eq=False)
class MetricSample:
    """
    Metric components on (torus grid) x (transverse grid).

    Attributes:
        kind: warped_radial, band or general_diagonal_block
        grid: torus grid
        transverse: strictly increasing transverse coordinates, shape (T,)
        components: g_ab of shape (*grid.resolution, T, D, D), D = dim + 1,
            the transverse coordinate last
    """
    kind: str
    grid: Grid
    transverse: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        if self.kind not in SAMPLE_KINDS:
            raise ValueError(f"Unknown sample kind {self.kind!r}")
        trans = np.asarray(self.transverse, dtype=float)
        if trans.ndim != 1 or trans.size < 2 or np.any(np.diff(trans) <= 0.0):
            raise ValueError("Transverse coordinates must be strictly increasing")
        D = self.grid.dim + 1
        expected = tuple(self.grid.resolution) + (trans.size, D, D)
        if self.components.shape != expected:
            raise ValueError(f"Components shape {self.components.shape} != {expected}")
        object.__setattr__(self, "transverse", trans)

    @property
    def dim(self) -> int:
        return self.grid.dim + 1


@dataclass(frozen=True)
class FDCurvature:
    """
    Finite-difference scalar curvature at one node.

    Attributes:
        value: R at the finest spacing
        error_estimate: |R_h - R_2h| / 3
        observed_order: log2(|R_2h - R_4h| / |R_h - R_2h|) (nan if undetermined)
        levels: (R_h, R_2h, R_4h)
    """
    value: float
    error_estimate: float
    observed_order: float
    levels: Tuple[float, float, float]

    @property
    def extrapolated(self) -> float:
        return (4.0 * self.levels[0] - self.levels[1]) / 3.0

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "value": self.value,
            "error_estimate": self.error_estimate,
            "observed_order": None if math.isnan(self.observed_order) else self.observed_order,
            "levels": list(self.levels),
        }


# =============================================================================
# Closed forms
# =============================================================================

def warped_scalar_curvature(state: FlowState, rho_u_rho: Optional[ScalarField] = None) -> ScalarField:
    """
    R of rho^2 gamma + u^2 rho^-2 drho^2 on the slice at state.rho:

        R = -2 u^-1 rho^-2 Delta_gamma u + 2(n-1) u^-3 rho du/drho - n(n-1) u^-2

    ``rho_u_rho`` defaults to the PDE value, which makes R = -n(n-1) an
    identity; pass a measured derivative to test the solver.
    """
    n = state.n
    u = state.u.values
    if rho_u_rho is None:
        rho_u_rho = time_derivative(state)
    lap = laplacian(state.v).values
    R = -2.0 / u * state.rho ** -2 * lap + 2.0 * (n - 1) * u ** -3 * rho_u_rho.values - n * (n - 1) * u ** -2
    return state.v.with_values(R)


def certify_flow_curvature(
    state: FlowState,
    dt_log: float,
    controls: SolverControls = DEFAULT_CONTROLS,
) -> float:
    """max |R_g + n(n-1)| on the slice, du/drho measured from three solver steps."""
    measured = measured_time_derivative(state, dt_log, controls)
    R = warped_scalar_curvature(state, measured)
    deviation = float(np.max(np.abs(R.values + state.n * (state.n - 1))))
    logger.debug(f"[ORACLE] rho={state.rho:.4g} dt={dt_log:.3e}: max|R + n(n-1)| = {deviation:.3e}")
    return deviation


# =============================================================================
# Finite differences
# =============================================================================

def _christoffel(g: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Gamma^a_bc from g (..., D, D) and dg (..., e, b, c) = d_e g_bc."""
    g_inv = np.linalg.inv(g)
    term = (
        np.einsum("...bdc->...dbc", dg)
        + np.einsum("...cdb->...dbc", dg)
        - dg
    )
    return 0.5 * np.einsum("...ad,...dbc->...abc", g_inv, term)


def _patch_indices(center: int, size: int, stride: int, periodic: bool) -> np.ndarray:
    offsets = stride * (np.arange(_PATCH) - _PATCH // 2)
    if periodic:
        return (center + offsets) % size
    # node sits at patch position k; shift k off-centre near the ends
    span = stride * (_PATCH - 1)
    lo = max(0, -((size - 1 - center - span) // stride))
    hi = min(_PATCH - 1, center // stride)
    if lo > hi:
        raise StencilOutOfRange(
            f"Transverse grid of {size} points cannot hold a stride-{stride} stencil at index {center}"
        )
    k = min(max(_PATCH // 2, lo), hi)
    return center - k * stride + stride * np.arange(_PATCH)


def _scalar_curvature_on_patch(sample: MetricSample, node: Sequence[int], stride: int) -> float:
    d = sample.grid.dim
    idx = []
    coords = []
    for a in range(d):
        res = sample.grid.resolution[a]
        idx.append(_patch_indices(node[a], res, stride, periodic=True))
        coords.append(stride / res * (np.arange(_PATCH) - _PATCH // 2))
    t_idx = _patch_indices(node[d], sample.transverse.size, stride, periodic=False)
    idx.append(t_idx)
    coords.append(sample.transverse[t_idx])
    center = [_PATCH // 2] * d + [int(np.nonzero(t_idx == node[d])[0][0])]

    g = sample.components[np.ix_(*idx)]
    det = np.linalg.det(g)
    if not np.all(np.isfinite(g)) or np.any(det <= 0.0):
        raise SingularMetric(f"Metric degenerate near node {tuple(node)}", details={"min_det": float(np.min(det))})

    D = d + 1
    dg = np.stack([np.gradient(g, coords[e], axis=e, edge_order=2) for e in range(D)], axis=-3)
    gamma = _christoffel(g, dg)
    dgamma = np.stack(
        [np.gradient(gamma, coords[e], axis=e, edge_order=2)[tuple(center)] for e in range(D)]
    )
    gamma_c = gamma[tuple(center)]
    ricci = (
        np.einsum("aabc->bc", dgamma)
        - np.einsum("caab->bc", dgamma)
        + np.einsum("aad,dbc->bc", gamma_c, gamma_c)
        - np.einsum("acd,dab->bc", gamma_c, gamma_c)
    )
    g_inv = np.linalg.inv(g[tuple(center)])
    return float(np.einsum("bc,bc->", g_inv, ricci))


def fd_scalar_curvature(sample: MetricSample, node: Sequence[int]) -> FDCurvature:
    """
    Scalar curvature at node = (i_0, ..., i_{d-1}, j) with an error estimate.

    Raises:
        SingularMetric: det g <= 0 or non-finite components in the stencil
        StencilOutOfRange: node index outside the sample or transverse grid
            too short for the coarsest level
    """
    node = tuple(int(i) for i in node)
    if len(node) != sample.dim:
        raise StencilOutOfRange(f"Node {node} does not have {sample.dim} indices")
    limits = tuple(sample.grid.resolution) + (sample.transverse.size,)
    if any(i < 0 or i >= lim for i, lim in zip(node, limits)):
        raise StencilOutOfRange(f"Node {node} outside sample of shape {limits}")

    levels = tuple(_scalar_curvature_on_patch(sample, node, s) for s in (1, 2, 4))
    d1 = abs(levels[0] - levels[1])
    d2 = abs(levels[1] - levels[2])
    order = math.log2(d2 / d1) if d1 > 0.0 and d2 > 0.0 else float("nan")
    result = FDCurvature(value=levels[0], error_estimate=d1 / 3.0, observed_order=order, levels=levels)
    logger.debug(f"[ORACLE] fd R at {node}: {result.value:.8g} +- {result.error_estimate:.2e} (order {order:.2f})")
    return result


# =============================================================================
# Sample builders
# =============================================================================

def _tile_gram(metric: FlatTorusMetric, res: Tuple[int, ...], T: int) -> np.ndarray:
    d = metric.dim
    comps = np.zeros(tuple(res) + (T, d + 1, d + 1))
    comps[..., :d, :d] = metric.gram
    return comps


def product_sample(metric: FlatTorusMetric, resolution, transverse: Sequence[float]) -> MetricSample:
    """Flat product ds^2 + gamma (R = 0)."""
    grid = make_grid(metric, resolution)
    trans = np.asarray(transverse, dtype=float)
    comps = _tile_gram(metric, grid.resolution, trans.size)
    comps[..., -1, -1] = 1.0
    return MetricSample(kind="general_diagonal_block", grid=grid, transverse=trans, components=comps)


def warped_sample_from_function(
    metric: FlatTorusMetric,
    resolution,
    rhos: Sequence[float],
    u_fn: Callable[..., np.ndarray],
) -> MetricSample:
    """rho^2 gamma + u^2 rho^-2 drho^2 with u = u_fn(x_0, ..., x_{d-1}, rho)."""
    grid = make_grid(metric, resolution)
    rhos = np.asarray(rhos, dtype=float)
    coords = grid.coordinates()
    comps = _tile_gram(metric, grid.resolution, rhos.size)
    for j, rho in enumerate(rhos):
        u = np.broadcast_to(np.asarray(u_fn(*coords, rho), dtype=float), grid.resolution)
        comps[..., j, :-1, :-1] *= rho ** 2
        comps[..., j, -1, -1] = u ** 2 / rho ** 2
    return MetricSample(kind="warped_radial", grid=grid, transverse=rhos, components=comps)


def warped_sample_from_states(states: Sequence[FlowState]) -> MetricSample:
    """Warped sample whose transverse grid is the radii of consecutive flow states."""
    grid = states[0].v.grid
    rhos = np.array([s.rho for s in states])
    comps = _tile_gram(grid.metric, grid.resolution, rhos.size)
    for j, s in enumerate(states):
        comps[..., j, :-1, :-1] *= s.rho ** 2
        comps[..., j, -1, -1] = s.u.values ** 2 / s.rho ** 2
    return MetricSample(kind="warped_radial", grid=grid, transverse=rhos, components=comps)


def warped_sample_from_flow(
    state: FlowState,
    dt_log: float,
    count: int = 17,
    controls: SolverControls = DEFAULT_CONTROLS,
) -> MetricSample:
    """Sample built from ``count`` fixed solver steps starting at ``state``."""
    states = [state]
    for _ in range(count - 1):
        states.append(step(states[-1], dt_log, controls))
    return warped_sample_from_states(states)


def band_sample(states: Sequence[Any]) -> MetricSample:
    """v^2 dt^2 + gamma_t from consecutive BandStates."""
    grid = states[0].v.grid
    ts = np.array([s.t for s in states])
    d = grid.dim
    comps = np.zeros(tuple(grid.resolution) + (ts.size, d + 1, d + 1))
    for j, s in enumerate(states):
        comps[..., j, :d, :d] = s.gamma_t
        comps[..., j, -1, -1] = s.v.values ** 2
    return MetricSample(kind="band", grid=grid, transverse=ts, components=comps)


def band_scalar_curvature(states: Sequence[Any], index: int, nodes: Optional[Sequence[Tuple[int, ...]]] = None) -> Dict[str, Any]:
    """
    fd scalar curvature of v^2 dt^2 + gamma_t at the band state ``states[index]``.

    Evaluates every torus node unless ``nodes`` (torus multi-indices) is
    given. Returns the ScalarField of values (nan where not evaluated) and
    the largest error estimate.
    """
    sample = band_sample(states)
    grid = sample.grid
    if nodes is None:
        nodes = [tuple(int(i) for i in idx) for idx in np.ndindex(*grid.resolution)]
    values = np.full(grid.resolution, np.nan)
    max_error = 0.0
    for node in nodes:
        res = fd_scalar_curvature(sample, tuple(node) + (index,))
        values[tuple(node)] = res.value
        max_error = max(max_error, res.error_estimate)
    return {"R": ScalarField(grid, values), "max_error_estimate": max_error}


def curvature_profile(sample: MetricSample, torus_node: Sequence[int], indices: Sequence[int]) -> List[FDCurvature]:
    """fd curvature along the transverse direction above one torus node."""
    return [fd_scalar_curvature(sample, tuple(torus_node) + (int(j),)) for j in indices]
