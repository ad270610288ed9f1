"""Tests for flat torus metrics, the winding systole and grids."""

import math

import numpy as np
import pytest

from torusfill.errors import BadDimension, BoundTooLarge, NotPositiveDefinite, NotSymmetric, ResolutionTooSmall
from torusfill.lattice_torus import (
    enumerate_candidates,
    make_flat_metric,
    make_grid,
    quadratic_length_sq,
    winding_systole,
)


def random_gram(rng, dim, max_condition=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = np.exp(rng.uniform(0.0, math.log(max_condition), dim))
    eigs[0], eigs[-1] = 1.0, max_condition ** rng.uniform(0.0, 1.0)
    gram = q @ np.diag(eigs) @ q.T
    return 0.5 * (gram + gram.T)


class TestFlatTorusMetric:
    """Validation and derived quantities of Gram matrices."""

    def test_identity_has_unit_volume(self, unit_metric):
        assert unit_metric.volume == pytest.approx(1.0)
        assert unit_metric.dim == 2

    def test_volume_is_sqrt_det(self, skew_metric):
        assert skew_metric.volume == pytest.approx(math.sqrt(1.75))

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetric):
            make_flat_metric([[1.0, 0.2], [0.0, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            make_flat_metric([[1.0, 0.0], [0.0, -1.0]])

    @pytest.mark.parametrize("gram", [[[1.0]], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    def test_rejects_bad_shapes(self, gram):
        with pytest.raises(BadDimension):
            make_flat_metric(gram)

    def test_scaled(self, unit_metric):
        assert unit_metric.scaled(4.0).volume == pytest.approx(4.0)


class TestWindingSystole:
    """Shortest lattice vector with nonzero winding component."""

    def test_identity(self, unit_metric):
        assert winding_systole(unit_metric) == pytest.approx(1.0)

    def test_skew_lattice(self, skew_metric):
        # (1, 0) and (1, -1) tie at squared length 2
        assert winding_systole(skew_metric) == pytest.approx(math.sqrt(2.0))

    def test_short_non_winding_vector_is_ignored(self):
        metric = make_flat_metric(np.diag([9.0, 0.01]))
        assert winding_systole(metric) == pytest.approx(3.0)

    def test_sheared_lattice_beats_the_axis(self):
        metric = make_flat_metric([[5.0, 2.0], [2.0, 1.0]])
        # (1, -2) has squared length 5 - 8 + 4 = 1
        assert winding_systole(metric) == pytest.approx(1.0)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_matches_exhaustive_enumeration(self, dim):
        rng = np.random.default_rng(1234 + dim)
        for _ in range(100):
            metric = make_flat_metric(random_gram(rng, dim))
            bound = math.sqrt(metric.gram[0, 0])
            candidates = enumerate_candidates(metric, bound)
            oracle = math.sqrt(min(quadratic_length_sq(metric, k) for k in candidates))
            assert winding_systole(metric) == oracle

    @pytest.mark.parametrize("scale", [0.25, 3.0])
    def test_scales_with_gram(self, skew_metric, scale):
        scaled = make_flat_metric(scale ** 2 * skew_metric.gram)
        assert winding_systole(scaled) == pytest.approx(scale * winding_systole(skew_metric), rel=1e-12)

    @pytest.mark.parametrize("basis", [
        [[1, 0], [3, 1]],
        [[1, 0, 0], [1, 1, 0], [0, -1, 1]],
    ])
    def test_unimodular_change_of_basis(self, basis):
        # first row e_0 keeps the winding component of every lattice vector
        A = np.array(basis, dtype=float)
        metric = make_flat_metric(random_gram(np.random.default_rng(7), A.shape[0], max_condition=4.0))
        gram = A.T @ metric.gram @ A
        changed = make_flat_metric(0.5 * (gram + gram.T))
        assert winding_systole(changed) == pytest.approx(winding_systole(metric), rel=1e-10)


class TestEnumerateCandidates:
    """Exhaustive box enumeration."""

    def test_unit_bound(self, unit_metric):
        assert enumerate_candidates(unit_metric, 1.0) == [(-1, 0), (1, 0)]

    def test_includes_diagonals(self, unit_metric):
        assert enumerate_candidates(unit_metric, 1.5) == [
            (-1, -1), (-1, 0), (-1, 1), (1, -1), (1, 0), (1, 1),
        ]

    def test_cap(self, unit_metric):
        with pytest.raises(BoundTooLarge):
            enumerate_candidates(unit_metric, 100.0, cap=10)

    def test_cap_from_environment(self, unit_metric, monkeypatch):
        monkeypatch.setenv("TORUSFILL_CANDIDATE_CAP", "5")
        with pytest.raises(BoundTooLarge):
            enumerate_candidates(unit_metric, 1.0)


class TestGrid:
    """Uniform periodic grids."""

    def test_node_count(self, unit_metric):
        assert make_grid(unit_metric, 16).node_count == 256

    def test_anisotropic_resolution(self, unit_metric):
        grid = make_grid(unit_metric, (8, 4))
        assert grid.resolution == (8, 4)
        assert grid.spacing == (0.125, 0.25)

    def test_node_order_axis_zero_fastest(self, unit_metric):
        coords = make_grid(unit_metric, 4).node_coordinates()
        np.testing.assert_allclose(coords[1], [0.25, 0.0])
        np.testing.assert_allclose(coords[4], [0.0, 0.25])

    def test_too_small(self, unit_metric):
        with pytest.raises(ResolutionTooSmall):
            make_grid(unit_metric, 3)

    def test_dimension_mismatch(self, unit_metric):
        with pytest.raises(BadDimension):
            make_grid(unit_metric, (8, 8, 8))
