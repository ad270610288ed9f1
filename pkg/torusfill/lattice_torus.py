"""
Lattice Torus: Flat Metrics on S^1 x T^(n-2)

A flat metric on the (n-1)-torus is stored as a constant Gram matrix in
coordinates normalised to the unit cube [0,1)^(n-1). Coordinate 0 is the S^1
factor: a closed geodesic is a lattice vector k, and it winds around the S^1
factor exactly when k[0] != 0.

Provides:
- FlatTorusMetric / make_flat_metric: validated Gram matrices with volume
- winding_systole: shortest winding lattice vector (Fincke-Pohst search)
- enumerate_candidates: exhaustive box enumeration used as the oracle
- Grid / make_grid: uniform periodic grids over the fundamental domain
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .errors import (
    BadDimension,
    BoundTooLarge,
    NotPositiveDefinite,
    NotSymmetric,
    ResolutionTooSmall,
)

logger = logging.getLogger(__name__)

WINDING_AXIS = 0
MIN_RESOLUTION = 4
DEFAULT_CANDIDATE_CAP = 10**7

# Relative slack when comparing squared lengths against a bound
_BOUND_SLACK = 1e-12


def _candidate_cap() -> int:
    raw = os.environ.get("TORUSFILL_CANDIDATE_CAP")
    if not raw:
        return DEFAULT_CANDIDATE_CAP
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"[LATTICE] Ignoring malformed TORUSFILL_CANDIDATE_CAP={raw!r}")
        return DEFAULT_CANDIDATE_CAP


@dataclass(frozen=True)
class FlatTorusMetric:
    """
    Constant Gram matrix of a flat metric on the (n-1)-torus.

    Attributes:
        gram: symmetric positive-definite (dim x dim) matrix, read-only
        volume: sqrt(det gram), the volume of the fundamental domain
        eigenvalues: ascending eigenvalues of gram
        winding_axis: index of the S^1 coordinate (always 0)
    """
    gram: np.ndarray
    volume: float
    eigenvalues: np.ndarray
    winding_axis: int = WINDING_AXIS

    @property
    def dim(self) -> int:
        return int(self.gram.shape[0])

    @property
    def inverse(self) -> np.ndarray:
        return linalg.inv(self.gram)

    def scaled(self, factor: float) -> "FlatTorusMetric":
        """Return the metric factor * gram (lengths scale by sqrt(factor))."""
        return make_flat_metric(self.gram * float(factor))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "dim": self.dim,
            "gram": self.gram.tolist(),
            "volume": self.volume,
            "winding_axis": self.winding_axis,
        }

    def __repr__(self) -> str:
        return f"FlatTorusMetric(dim={self.dim}, volume={self.volume:.6g})"


def make_flat_metric(gram: Union[Sequence[Sequence[float]], np.ndarray]) -> FlatTorusMetric:
    """
    Validate a Gram matrix and build the metric.

    Raises:
        BadDimension: matrix not square or smaller than 2x2
        NotSymmetric: asymmetric beyond round-off
        NotPositiveDefinite: some eigenvalue <= 0 (or non-finite entries)
    """
    g = np.array(gram, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise BadDimension(f"Gram matrix must be square, got shape {g.shape}")
    if g.shape[0] < 2:
        raise BadDimension(f"Gram matrix must be at least 2x2, got {g.shape[0]}x{g.shape[0]}")
    if not np.all(np.isfinite(g)):
        raise NotPositiveDefinite("Gram matrix has non-finite entries")

    scale = max(float(np.max(np.abs(g))), 1e-300)
    if not np.allclose(g, g.T, rtol=0.0, atol=1e-12 * scale):
        raise NotSymmetric("Gram matrix is not symmetric", details={"gram": g.tolist()})
    g = 0.5 * (g + g.T)

    eigenvalues = linalg.eigvalsh(g)
    if eigenvalues[0] <= 0.0:
        raise NotPositiveDefinite(
            f"Gram matrix has non-positive eigenvalue {eigenvalues[0]:.6g}",
            details={"eigenvalues": eigenvalues.tolist()},
        )

    volume = math.sqrt(float(linalg.det(g)))
    g.setflags(write=False)
    eigenvalues.setflags(write=False)
    return FlatTorusMetric(gram=g, volume=volume, eigenvalues=eigenvalues)


def quadratic_length_sq(metric: FlatTorusMetric, k: Sequence[int]) -> float:
    """Squared length k^T G k of an integer lattice vector."""
    kv = np.asarray(k, dtype=float)
    return float(kv @ metric.gram @ kv)


# =============================================================================
# Winding systole
# =============================================================================

def _fincke_pohst(metric: FlatTorusMetric, bound_sq: float, shrink: bool) -> Tuple[float, List[Tuple[int, ...]]]:
    """
    Depth-first enumeration of winding lattice vectors with k^T G k <= bound_sq.

    Uses the Cholesky factor G = R^T R, so that
        k^T G k = sum_i q_ii (k_i + sum_{j>i} mu_ij k_j)^2
    and coordinates are fixed from the last one down to the winding axis.
    With ``shrink`` the bound drops to every improvement found.
    """
    r = linalg.cholesky(metric.gram, lower=False)
    d = metric.dim
    q_diag = np.diag(r) ** 2
    mu = r / np.diag(r)[:, None]

    state = {"bound": bound_sq * (1.0 + _BOUND_SLACK)}
    found: List[Tuple[int, ...]] = []
    k = np.zeros(d, dtype=np.int64)

    def search(i: int, partial: float) -> None:
        center = -float(np.dot(mu[i, i + 1:], k[i + 1:]))
        remaining = state["bound"] - partial
        if remaining < 0.0:
            return
        radius = math.sqrt(remaining / q_diag[i])
        lo = math.ceil(center - radius)
        hi = math.floor(center + radius)
        for k_i in range(lo, hi + 1):
            term = q_diag[i] * (k_i - center) ** 2
            if partial + term > state["bound"]:
                continue
            k[i] = k_i
            if i == WINDING_AXIS:
                if k_i == 0:
                    continue
                vec = tuple(int(x) for x in k)
                found.append(vec)
                if shrink:
                    state["bound"] = min(state["bound"], quadratic_length_sq(metric, vec))
            else:
                search(i - 1, partial + term)
        k[i] = 0

    search(d - 1, 0.0)
    return state["bound"], found


def winding_systole(metric: FlatTorusMetric) -> float:
    """
    Length of the shortest closed geodesic with nonzero winding around S^1.

    sigma = min { sqrt(k^T G k) : k integer, k[0] != 0 }.
    The pure winding circle (1, 0, ..., 0) bounds the search radius.
    """
    start = float(metric.gram[WINDING_AXIS, WINDING_AXIS])
    best_sq, _ = _fincke_pohst(metric, start, shrink=True)
    # Collect every vector within round-off of the optimum so that ties are
    # resolved with the same arithmetic the exhaustive oracle uses.
    _, near = _fincke_pohst(metric, best_sq * (1.0 + 1e-9), shrink=False)
    if not near:
        near = [tuple([1] + [0] * (metric.dim - 1))]
    sigma_sq = min(quadratic_length_sq(metric, vec) for vec in near)
    sigma = math.sqrt(sigma_sq)
    logger.debug(f"[LATTICE] winding systole {sigma:.12g} ({len(near)} minimal candidates)")
    return sigma


def enumerate_candidates(
    metric: FlatTorusMetric,
    length_bound: float,
    cap: Optional[int] = None,
) -> List[Tuple[int, ...]]:
    """
    Exhaustive list of winding lattice vectors no longer than length_bound.

    Searches the box |k_i| <= ceil(length_bound / sqrt(lambda_min)) which
    contains every lattice vector of that length. Sorted lexicographically.

    Raises:
        BoundTooLarge: the box holds more than ``cap`` candidates
    """
    if length_bound <= 0.0:
        raise ValueError(f"length_bound must be positive, got {length_bound}")
    cap = _candidate_cap() if cap is None else cap
    d = metric.dim
    radius = int(math.ceil(length_bound / math.sqrt(float(metric.eigenvalues[0]))))
    count = (2 * radius + 1) ** d
    if count > cap:
        raise BoundTooLarge(
            f"Enumeration box holds {count} candidates (cap {cap})",
            details={"radius": radius, "dim": d},
        )

    bound_sq = length_bound * length_bound
    axis = np.arange(-radius, radius + 1, dtype=np.int64)
    rest = np.stack(np.meshgrid(*([axis] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1)

    result: List[Tuple[int, ...]] = []
    for k0 in axis:
        if k0 == 0:
            continue
        block = np.concatenate([np.full((rest.shape[0], 1), k0, dtype=np.int64), rest], axis=1)
        lengths = np.einsum("ij,jk,ik->i", block.astype(float), metric.gram, block.astype(float))
        keep = block[lengths <= bound_sq * (1.0 + 1e-9)]
        for vec in keep:
            tup = tuple(int(x) for x in vec)
            if quadratic_length_sq(metric, tup) <= bound_sq * (1.0 + _BOUND_SLACK):
                result.append(tup)

    result.sort()
    logger.debug(f"[LATTICE] {len(result)} candidates within {length_bound:.6g} (box radius {radius})")
    return result


# =============================================================================
# Grids
# =============================================================================

@dataclass(frozen=True)
class Grid:
    """
    Uniform periodic grid over the unit-cube fundamental domain.

    Node (i_0, ..., i_{d-1}) sits at x_a = i_a / resolution[a]. The flat node
    order runs axis 0 fastest; in memory values are kept as arrays of shape
    ``resolution`` and flattened with ``order="F"`` when serialised.
    """
    metric: FlatTorusMetric
    resolution: Tuple[int, ...]
    spacing: Tuple[float, ...] = field(default=())

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.resolution

    def axes(self) -> List[np.ndarray]:
        return [np.arange(n) / n for n in self.resolution]

    def coordinates(self) -> Tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``resolution`` (ij indexing)."""
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def node_coordinates(self) -> np.ndarray:
        """(node_count, dim) coordinates in node order (axis 0 fastest)."""
        return np.stack([c.ravel(order="F") for c in self.coordinates()], axis=1)

    def refined(self, factor: int = 2) -> "Grid":
        return make_grid(self.metric, tuple(n * factor for n in self.resolution))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {"resolution": list(self.resolution), "metric": self.metric.to_dict()}


def make_grid(metric: FlatTorusMetric, resolution: Union[int, Sequence[int]]) -> Grid:
    """
    Build a grid; a scalar resolution applies to every axis.

    Raises:
        ResolutionTooSmall: some axis has fewer than 4 points
        BadDimension: resolution length differs from the metric dimension
    """
    if isinstance(resolution, (int, np.integer)):
        res = tuple([int(resolution)] * metric.dim)
    else:
        res = tuple(int(r) for r in resolution)
    if len(res) != metric.dim:
        raise BadDimension(f"Resolution {res} does not match metric dimension {metric.dim}")
    if min(res) < MIN_RESOLUTION:
        raise ResolutionTooSmall(f"Resolution {res} below minimum {MIN_RESOLUTION} per axis")
    return Grid(metric=metric, resolution=res, spacing=tuple(1.0 / r for r in res))
