"""Tests for the interpolation band between gamma_hat = I and gamma = 4 I."""

import math

import numpy as np
import pytest

from torusfill import interpolation_band
from torusfill.curvature_oracle import band_scalar_curvature
from torusfill.errors import DomainError, NonFinite, NonPositiveH, NotDominated, StabilityViolation
from torusfill.interpolation_band import (
    BAND_TRACE_COLUMNS,
    DEFAULT_BAND_DT,
    band_barriers,
    band_closed_form_curvature,
    band_constant_N,
    band_evolve,
    band_ode_reference,
    band_step,
    band_suggest_dt,
    band_time_derivative,
    band_total_mean_curvature,
    compose_interpolation,
    init_band,
    total_mean_curvature_bound,
    trace_q,
    unperturbed_band_curvature,
    verify_band,
)
from torusfill.lattice_torus import make_flat_metric, make_grid
from torusfill.mass_analysis import ADMISSIBLE
from torusfill.spectral_field import constant_field, field_from_function


@pytest.fixture(scope="module")
def endpoints():
    return make_flat_metric(np.eye(2)), make_flat_metric(4.0 * np.eye(2))


@pytest.fixture(scope="module")
def grid8(endpoints):
    return make_grid(endpoints[0], 8)


@pytest.fixture(scope="module")
def flat_run(endpoints, grid8):
    gamma_hat, gamma = endpoints
    h = constant_field(grid8, 3.0)
    return h, band_evolve(init_band(gamma_hat, gamma, h))


@pytest.fixture(scope="module")
def wavy_run(endpoints, grid8):
    gamma_hat, gamma = endpoints
    h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(2.0 * math.pi * x[0]))
    return h, band_evolve(init_band(gamma_hat, gamma, h))


@pytest.fixture(scope="module")
def composed(endpoints, grid8):
    return compose_interpolation(*endpoints, constant_field(grid8, 6.0), 3)


class TestPathQuantities:
    """Closed forms along gamma_t = (1 + 3t) I."""

    @pytest.mark.parametrize("t", [0.0, 0.25, 1.0])
    def test_trace_and_curvature(self, endpoints, t):
        assert trace_q(*endpoints, t) == pytest.approx(6.0 / (1.0 + 3.0 * t))
        assert unperturbed_band_curvature(*endpoints, t) == pytest.approx(4.5 / (1.0 + 3.0 * t) ** 2)

    def test_constant_N(self, endpoints):
        assert band_constant_N(*endpoints) == pytest.approx(1.5, rel=1e-8)

    def test_barriers(self):
        w_minus, w_plus = band_barriers(1.0, 1.0, 1.5, 1.0)
        assert w_minus == pytest.approx(0.35437, abs=1e-5)
        assert w_plus == pytest.approx(2.117, abs=1e-3)
        assert band_barriers(1.0, 1.0, 1.5, 0.0) == pytest.approx((1.0, 1.0))

    def test_barriers_reject_bad_input(self):
        with pytest.raises(DomainError):
            band_barriers(0.0, 1.0, 1.5, 0.5)
        with pytest.raises(DomainError):
            band_barriers(1.0, 1.0, -1.0, 0.5)


class TestInit:

    def test_initial_lapse(self, endpoints, grid8):
        state = init_band(*endpoints, constant_field(grid8, 3.0))
        np.testing.assert_allclose(state.v.values, 1.0)
        np.testing.assert_allclose(state.mean_curvature().values, 3.0)
        assert state.N == pytest.approx(1.5, rel=1e-8)
        assert band_total_mean_curvature(state) == pytest.approx(3.0)

    def test_not_dominated(self, endpoints, grid8):
        gamma_hat, _ = endpoints
        with pytest.raises(NotDominated):
            init_band(gamma_hat, make_flat_metric([[4.0, 0.0], [0.0, 0.5]]), constant_field(grid8, 3.0))

    def test_nonpositive_h(self, endpoints, grid8):
        h = field_from_function(grid8, lambda *x: np.cos(2.0 * math.pi * x[0]))
        with pytest.raises(NonPositiveH):
            init_band(*endpoints, h)


class TestStep:

    def test_single_step(self, endpoints, grid8):
        state = band_step(init_band(*endpoints, constant_field(grid8, 3.0)), 1.0 / 64.0)
        assert state.t == pytest.approx(1.0 / 64.0)
        np.testing.assert_allclose(state.v.values, (1.0 + 3.0 / 64.0) ** -0.25, rtol=1e-5)

    def test_step_past_end(self, endpoints, grid8):
        state = init_band(*endpoints, constant_field(grid8, 3.0))
        with pytest.raises(DomainError):
            band_step(state, 1.5)
        with pytest.raises(DomainError):
            band_step(state, 0.0)

    def test_suggestion(self, endpoints, grid8):
        assert band_suggest_dt(init_band(*endpoints, constant_field(grid8, 3.0))) == math.inf
        h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(2.0 * math.pi * x[0]))
        limit = band_suggest_dt(init_band(*endpoints, h))
        assert DEFAULT_BAND_DT < limit < 0.01

    def test_large_dt_is_capped_by_suggestion(self, endpoints, grid8):
        h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(2.0 * math.pi * x[0]))
        state = init_band(*endpoints, h)
        final, states = band_evolve(state, 0.5)
        assert len(states) - 1 >= 1.0 / band_suggest_dt(state)
        assert final.t == 1.0
        assert verify_band(states, h).items["barriers"]

    def test_unstable_run_is_restarted(self, endpoints, grid8, monkeypatch):
        monkeypatch.setattr(interpolation_band, "band_suggest_dt", lambda state: math.inf)
        h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(6.0 * math.pi * x[0]))
        final, states = band_evolve(init_band(*endpoints, h), 0.5)
        assert len(states) - 1 > 2
        assert final.v.min() > 0.0
        assert verify_band(states, h).items["barriers"]

    def test_gives_up_without_halvings(self, endpoints, grid8, monkeypatch):
        monkeypatch.setattr(interpolation_band, "band_suggest_dt", lambda state: math.inf)
        h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(6.0 * math.pi * x[0]))
        with pytest.raises((StabilityViolation, NonFinite)):
            band_evolve(init_band(*endpoints, h), 0.5, max_halvings=0)


class TestFlatEvolution:
    """h = 3: v(t) = (1 + 3t)^(-1/4) and total mean curvature 3 (1 + 3t)^(1/4)."""

    def test_final_lapse(self, endpoints, flat_run):
        _, (final, states) = flat_run
        assert final.t == 1.0
        assert len(states) == 257
        np.testing.assert_allclose(final.v.values, 4.0 ** -0.25, rtol=1e-8)
        reference = band_ode_reference(1.0, *endpoints, 1.0)
        np.testing.assert_allclose(final.v.values, reference, atol=1e-8)

    def test_total_mean_curvature(self, flat_run):
        _, (final, states) = flat_run
        for s in states[::64]:
            assert band_total_mean_curvature(s) == pytest.approx(3.0 * (1.0 + 3.0 * s.t) ** 0.25, rel=1e-8)

    def test_verify(self, flat_run):
        h, (_, states) = flat_run
        report = verify_band(states, h)
        assert report.passed, report.failures
        assert set(report.items) == {
            "endpoint_metrics",
            "initial_mean_curvature",
            "positive_mean_curvature",
            "scalar_curvature",
            "total_mean_curvature_monotone",
            "barriers",
        }
        assert report.details["total_mean_curvature_strict"]
        assert len(report.csv_rows()[0]) == len(BAND_TRACE_COLUMNS)

    def test_closed_form_curvature_vanishes(self, flat_run):
        _, (_, states) = flat_run
        s = states[100]
        R = band_closed_form_curvature(s, band_time_derivative(s))
        np.testing.assert_allclose(R.values, 0.0, atol=1e-10)

    def test_fd_curvature(self, flat_run):
        _, (_, states) = flat_run
        result = band_scalar_curvature(states, 128, [(0, 0), (3, 5)])
        values = result["R"].values
        assert np.count_nonzero(~np.isnan(values)) == 2
        assert np.nanmax(np.abs(values)) <= max(1e-3, 3.0 * result["max_error_estimate"])


class TestInhomogeneousEvolution:
    """h = 3 + 0.2 cos(2 pi x0)."""

    def test_band_items(self, wavy_run):
        h, (_, states) = wavy_run
        report = verify_band(states, h)
        assert report.items["barriers"]
        assert report.items["total_mean_curvature_monotone"]
        assert report.items["positive_mean_curvature"]
        assert report.items["initial_mean_curvature"]

    def test_closed_form_curvature_vanishes(self, wavy_run):
        _, (_, states) = wavy_run
        s = states[64]
        R = band_closed_form_curvature(s, band_time_derivative(s))
        np.testing.assert_allclose(R.values, 0.0, atol=1e-9)

    def test_self_convergence_order(self, endpoints, grid8):
        h = field_from_function(grid8, lambda *x: 3.0 + 0.2 * np.cos(2.0 * math.pi * x[0]))
        state = init_band(*endpoints, h)
        finals = [band_evolve(state, dt)[0].v.values for dt in (1.0 / 256.0, 1.0 / 512.0, 1.0 / 1024.0)]
        d1 = np.max(np.abs(finals[0] - finals[1]))
        d2 = np.max(np.abs(finals[1] - finals[2]))
        assert d1 > d2 > 0.0
        assert 1.7 < math.log2(d1 / d2) < 2.4


class TestComposition:

    def test_compose(self, composed):
        report, states = composed
        assert report.inner_total == pytest.approx(6.0)
        assert report.outer_total == pytest.approx(3.0 * 4.0 ** 0.25, rel=1e-8)
        assert report.ratio <= 2.0
        assert report.outer_bound.verdict == ADMISSIBLE
        assert report.band.passed

    def test_compose_flows_outer_data(self, composed):
        report, _ = composed
        # outer data is homogeneous: u0 = 2 / (3/4 4^(1/4)), mu0 = (1 - u0^-2) / 2
        u0 = 2.0 / (0.75 * 4.0 ** 0.25)
        mu0 = 0.5 * (1.0 - u0 ** -2)
        assert report.outer_flow.mass.mu0 == pytest.approx(mu0, rel=1e-5)
        assert report.outer_flow.inequality.passed
        assert report.composed_bound == pytest.approx(4.0 * 2.0 * (1.0 - mu0), rel=1e-5)
        assert 0.5 * report.inner_total <= report.outer_total <= report.composed_bound
        assert report.passed
        assert report.to_dict()["outer_flow"]["mass"]["mu0"] == pytest.approx(mu0, rel=1e-5)

    def test_total_mean_curvature_bound(self, endpoints):
        gamma_hat, _ = endpoints
        rhs = 0.5 * (4.0 * math.pi / 6.0) ** 3
        assert total_mean_curvature_bound(gamma_hat, 3, 4.0) == pytest.approx(8.0 * (2.0 + rhs))

    def test_bound_needs_scale_above_one(self, endpoints):
        with pytest.raises(NotDominated):
            total_mean_curvature_bound(endpoints[0], 3, 1.0)
