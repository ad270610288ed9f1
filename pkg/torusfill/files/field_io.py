"""
Field I/O: CSV and binary layouts for grid fields.

CSV:    header ``node,x0,...,x{d-1},value``, one row per node.
Binary: little-endian int64 dim, int64 resolution[dim], then float64 values.

In both layouts nodes run in node order (axis 0 fastest).
"""

from __future__ import annotations

import csv
import io
import logging
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import BadDimension
from ..lattice_torus import FlatTorusMetric, make_grid
from ..spectral_field import ScalarField

logger = logging.getLogger(__name__)

_INT = np.dtype("<i8")
_FLOAT = np.dtype("<f8")


def field_to_bytes(field: ScalarField) -> bytes:
    """Serialize a field in the binary layout."""
    res = field.grid.resolution
    header = np.array([len(res), *res], dtype=_INT).tobytes()
    return header + np.asarray(field.flat_values(), dtype=_FLOAT).tobytes()


def field_from_bytes(data: bytes, metric: FlatTorusMetric) -> ScalarField:
    """
    Parse the binary layout onto a grid of ``metric``.

    Raises:
        BadDimension: header inconsistent with the payload or the metric
    """
    if len(data) < _INT.itemsize:
        raise BadDimension("Field payload too short for a header")
    dim = int(np.frombuffer(data[:8], dtype=_INT)[0])
    if dim != metric.dim:
        raise BadDimension(f"Field dimension {dim} does not match metric dimension {metric.dim}")
    header_size = 8 * (1 + dim)
    res = tuple(int(r) for r in np.frombuffer(data[8:header_size], dtype=_INT))
    values = np.frombuffer(data[header_size:], dtype=_FLOAT)
    expected = int(np.prod(res))
    if values.size != expected:
        raise BadDimension(f"Field payload holds {values.size} values, expected {expected} for {res}")
    grid = make_grid(metric, res)
    return ScalarField(grid, values.reshape(res, order="F"))


def field_rows(field: ScalarField) -> Tuple[List[str], List[Sequence[float]]]:
    """Header and rows of the CSV layout."""
    d = field.grid.dim
    header = ["node"] + [f"x{a}" for a in range(d)] + ["value"]
    coords = field.grid.node_coordinates()
    values = field.flat_values()
    rows = [[i, *coords[i].tolist(), float(values[i])] for i in range(values.size)]
    return header, rows


def field_to_csv(field: ScalarField) -> str:
    header, rows = field_rows(field)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return buffer.getvalue()


def field_from_csv(text: str, metric: FlatTorusMetric, resolution: Sequence[int]) -> ScalarField:
    """
    Parse the CSV layout; rows may come in any order, ``node`` indexes them.

    Raises:
        BadDimension: wrong column count or node count
    """
    grid = make_grid(metric, resolution)
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if len(header) != grid.dim + 2:
        raise BadDimension(f"Field CSV has {len(header)} columns, expected {grid.dim + 2}")
    values = np.full(grid.node_count, np.nan)
    for row in reader:
        if not row:
            continue
        values[int(row[0])] = float(row[-1])
    if np.any(np.isnan(values)):
        raise BadDimension(f"Field CSV does not cover all {grid.node_count} nodes")
    return ScalarField(grid, values.reshape(grid.resolution, order="F"))


def read_field(path: str, metric: FlatTorusMetric) -> ScalarField:
    """Read a binary field file."""
    with open(path, "rb") as fh:
        data = fh.read()
    logger.debug(f"[STORE] Read field {path} ({len(data)} bytes)")
    return field_from_bytes(data, metric)
