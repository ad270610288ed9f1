"""
Interpolation Band: Sigma x [0, 1] between Flat Metrics gamma_hat < gamma

With gamma_t = gamma_hat + t Q (Q = gamma - gamma_hat positive definite) and
g = v^2 dt^2 + gamma_t, the lapse v solves

    1/2 tr_{gamma_t} Q dv/dt = v^2 Delta_{gamma_t} v - 1/2 (K + R_{gamma_t}) v^3
                               + 1/2 (R_{gamma_t} - R_hat(t)) v,

with v(., 0) = 1/2 tr_{gamma_hat} Q / h. R_hat(t) is the scalar curvature of
dt^2 + gamma_t. For flat inputs R_{gamma_t} = 0 and K = sup|R_{gamma_t}| = 0,
so the equation reduces to

    dv/dt = (2 / tr_{gamma_t} Q) (v^2 Delta_{gamma_t} v - 1/2 R_hat(t) v).

Then R_g = -K, H_{Sigma_t} = 1/2 tr_{gamma_t} Q / v, and the total mean
curvature int H dvol_{gamma_t} is non-decreasing in t.

Time stepping mirrors flow_solver: integrating factor for the frozen
coefficient part a(t)(c Delta_{gamma_t} - R_hat(t)/2), a = 2/tr Q, c = mean(v)^2,
with the t-dependent exponent integrated by Simpson's rule, and a Heun step
for the remainder a(t)(v^2 - c) Delta_{gamma_t} v.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import integrate, linalg, optimize

from .curvature_oracle import band_scalar_curvature
from .errors import (
    DomainError,
    NonFinite,
    NonPositiveH,
    NotDominated,
    StabilityViolation,
)
from .flow_solver import DEFAULT_CONTROLS, SolverControls
from .lattice_torus import FlatTorusMetric, make_flat_metric, make_grid
from .mass_analysis import BoundVerdict, PipelineReport, systole_bound, systole_bound_pipeline
from .spectral_field import ScalarField, integrate as integrate_field, operators_for

logger = logging.getLogger(__name__)

DEFAULT_BAND_DT = 1.0 / 256.0
BAND_TRACE_COLUMNS = ("t", "min_v", "max_v", "w_minus", "w_plus", "total_mean_curvature", "fd_R_max_dev")


# =============================================================================
# Geometry of the unperturbed band dt^2 + gamma_t
# =============================================================================

def gamma_path(gamma_hat: FlatTorusMetric, gamma: FlatTorusMetric, t: float) -> np.ndarray:
    """gamma_t = gamma_hat + t Q."""
    return gamma_hat.gram + t * (gamma.gram - gamma_hat.gram)


def trace_q(gamma_hat: FlatTorusMetric, gamma: FlatTorusMetric, t: float) -> float:
    """tr_{gamma_t} Q."""
    g_t = gamma_path(gamma_hat, gamma, t)
    Q = gamma.gram - gamma_hat.gram
    return float(np.trace(linalg.solve(g_t, Q, assume_a="pos")))


def unperturbed_band_curvature(gamma_hat: FlatTorusMetric, gamma: FlatTorusMetric, t: float) -> float:
    """
    R of dt^2 + gamma_t for flat gamma_t:

        R_hat(t) = R_{gamma_t} + 3/4 |Q|^2_{gamma_t} - 1/4 (tr_{gamma_t} Q)^2,   R_{gamma_t} = 0
    """
    g_t = gamma_path(gamma_hat, gamma, t)
    S = linalg.solve(g_t, gamma.gram - gamma_hat.gram, assume_a="pos")
    return float(0.75 * np.trace(S @ S) - 0.25 * np.trace(S) ** 2)


def band_constant_N(gamma_hat: FlatTorusMetric, gamma: FlatTorusMetric, K: float = 0.0) -> float:
    """
    N = sup_t 2 (|R_{gamma_t} - R_hat(t)| + |K + R_{gamma_t}|) / tr_{gamma_t} Q over [0, 1].

    Grid scan followed by a bounded refinement around the best sample.
    """
    def ratio(t: float) -> float:
        return 2.0 * (abs(unperturbed_band_curvature(gamma_hat, gamma, t)) + abs(K)) / trace_q(gamma_hat, gamma, t)

    ts = np.linspace(0.0, 1.0, 65)
    values = np.array([ratio(t) for t in ts])
    best = int(np.argmax(values))
    lo, hi = ts[max(best - 1, 0)], ts[min(best + 1, ts.size - 1)]
    refined = optimize.minimize_scalar(lambda t: -ratio(t), bounds=(lo, hi), method="bounded")
    return float(max(values[best], -refined.fun))


# =============================================================================
# State
# =============================================================================

@dataclass(frozen=True, eq=False)
class BandState:
    """
    Lapse v on Sigma_t of the band.

    Attributes:
        t: band parameter in [0, 1]
        v: lapse field (> 0)
        gamma_hat, gamma: endpoint metrics (gamma - gamma_hat positive definite)
        K: sup |R_{gamma_t}| (0 for flat inputs)
        N: barrier growth constant
    """
    t: float
    v: ScalarField
    gamma_hat: FlatTorusMetric
    gamma: FlatTorusMetric
    K: float
    N: float

    @property
    def Q(self) -> np.ndarray:
        return self.gamma.gram - self.gamma_hat.gram

    @property
    def gamma_t(self) -> np.ndarray:
        return gamma_path(self.gamma_hat, self.gamma, self.t)

    @property
    def metric_t(self) -> FlatTorusMetric:
        return make_flat_metric(self.gamma_t)

    @property
    def trace_q(self) -> float:
        return trace_q(self.gamma_hat, self.gamma, self.t)

    def mean_curvature(self) -> ScalarField:
        """H_{Sigma_t} = 1/2 tr_{gamma_t} Q / v."""
        return self.v.with_values(0.5 * self.trace_q / self.v.values)

    def __repr__(self) -> str:
        return f"BandState(t={self.t:.6g}, v in [{self.v.min():.6g}, {self.v.max():.6g}])"


def init_band(
    gamma_hat: FlatTorusMetric,
    gamma: FlatTorusMetric,
    h: ScalarField,
) -> BandState:
    """
    Initial lapse v0 = 1/2 tr_{gamma_hat} Q / h on h's grid.

    Raises:
        NotDominated: Q = gamma - gamma_hat not positive definite
        NonPositiveH: min h <= 0
    """
    if gamma_hat.dim != gamma.dim:
        raise DomainError(f"Endpoint dimensions differ: {gamma_hat.dim} vs {gamma.dim}")
    Q = gamma.gram - gamma_hat.gram
    q_eigs = linalg.eigvalsh(Q)
    if q_eigs[0] <= 0.0:
        raise NotDominated(
            f"gamma - gamma_hat is not positive definite (min eigenvalue {q_eigs[0]:.6g})",
            details={"eigenvalues": q_eigs.tolist()},
        )
    if not h.is_finite() or h.min() <= 0.0:
        raise NonPositiveH(f"h must be positive (min h = {h.min():.6g})")

    tr0 = trace_q(gamma_hat, gamma, 0.0)
    K = 0.0
    N = band_constant_N(gamma_hat, gamma, K)
    # v lives on the gamma_hat grid; the spectral operators are rebuilt per gamma_t
    v0 = h.with_values(0.5 * tr0 / h.values)
    logger.info(f"[BAND] init: tr Q = {tr0:.6g}, K = {K:g}, N = {N:.8g}, v0 in [{v0.min():.6g}, {v0.max():.6g}]")
    return BandState(t=0.0, v=v0, gamma_hat=gamma_hat, gamma=gamma, K=K, N=N)


def band_barriers(v0_min: float, v0_max: float, N: float, t: float) -> Tuple[float, float]:
    """
    Explicit ODE barriers:

        w_-(t) = m / ((1 + m^2) e^{N t} - m^2)^(1/2),  m = min v0
        w_+(t) = max v0 e^{N t / 2}
    """
    if v0_min <= 0.0 or v0_max <= 0.0:
        raise DomainError("Barrier initial values must be positive")
    if N < 0.0:
        raise DomainError(f"N must be non-negative, got {N}")
    m2 = v0_min ** 2
    w_minus = v0_min / math.sqrt((1.0 + m2) * math.exp(N * t) - m2)
    w_plus = v0_max * math.exp(0.5 * N * t)
    return w_minus, w_plus


# =============================================================================
# Stepping
# =============================================================================

def _band_operators(state: BandState, t: float):
    grid = make_grid(make_flat_metric(gamma_path(state.gamma_hat, state.gamma, t)), state.v.grid.resolution)
    return operators_for(grid)


def _remainder(v: np.ndarray, v_hat: np.ndarray, a: float, c: float, ops) -> np.ndarray:
    lap = ops.inverse(ops.laplacian_symbol * v_hat)
    return a * (v ** 2 - c) * lap


def band_step(state: BandState, dt: float) -> BandState:
    """
    One integrating-factor Heun step of size dt.

    Raises:
        StabilityViolation: min v <= 0 after the step
        NonFinite: NaN/inf produced
    """
    if dt <= 0.0 or state.t + dt > 1.0 + 1e-12:
        raise DomainError(f"Band step dt={dt} from t={state.t} leaves [0, 1]")
    t0, t1 = state.t, state.t + dt
    tm = 0.5 * (t0 + t1)
    ops0, opsm, ops1 = (_band_operators(state, s) for s in (t0, tm, t1))
    a0, am, a1 = (2.0 / trace_q(state.gamma_hat, state.gamma, s) for s in (t0, tm, t1))
    r0, rm, r1 = (unperturbed_band_curvature(state.gamma_hat, state.gamma, s) for s in (t0, tm, t1))

    v = state.v.values
    v_hat = ops0.forward(v)
    zero = (0,) * v.ndim
    c = (float(v_hat[zero].real) / v.size) ** 2

    def rate(a: float, ops, r: float) -> np.ndarray:
        return a * (c * ops.laplacian_symbol - 0.5 * r)

    # Simpson's rule for the exponent over [t0, t1]
    exponent = dt / 6.0 * (rate(a0, ops0, r0) + 4.0 * rate(am, opsm, rm) + rate(a1, ops1, r1))
    factor = np.exp(exponent)

    n0_hat = ops0.forward(_remainder(v, v_hat, a0, c, ops0))
    v1_hat = factor * (v_hat + dt * n0_hat)
    v1 = ops1.inverse(v1_hat)
    n1_hat = ops1.forward(_remainder(v1, v1_hat, a1, c, ops1))
    new = ops1.inverse(factor * (v_hat + 0.5 * dt * n0_hat) + 0.5 * dt * n1_hat)

    if not np.all(np.isfinite(new)):
        raise NonFinite(f"Non-finite lapse after band step at t={t0:.6g}")
    if np.min(new) <= 0.0:
        raise StabilityViolation(f"min v = {np.min(new):.3e} after band step at t={t0:.6g}")
    t_new = 1.0 if abs(t1 - 1.0) < 1e-12 else t1
    return BandState(t=t_new, v=state.v.with_values(new), gamma_hat=state.gamma_hat, gamma=state.gamma, K=state.K, N=state.N)


# Step halvings allowed before band_evolve gives up
MAX_BAND_HALVINGS = 8
# Relative escape from the barrier envelope treated as an unstable step
BARRIER_ESCAPE_RTOL = 1e-3


def band_suggest_dt(state: BandState) -> float:
    """
    Step bound for the explicit remainder a(t) (v^2 - c) Delta_{gamma_t} v.

    Uses the largest a(t) on [t, 1] (at t = 1) against the largest Laplacian
    eigenvalue on [t, 1] (at the current t); inf when v is homogeneous.
    """
    v = state.v.values
    c = float(np.mean(v)) ** 2
    deviation = float(np.max(np.abs(v ** 2 - c)))
    if deviation == 0.0:
        return math.inf
    a_max = 2.0 / trace_q(state.gamma_hat, state.gamma, 1.0)
    eigenvalue = _band_operators(state, state.t).max_eigenvalue
    return 1.0 / (a_max * deviation * eigenvalue)


def _uniform_run(state: BandState, steps: int) -> List[BandState]:
    h = (1.0 - state.t) / steps
    v0_min, v0_max = state.v.min(), state.v.max()
    states = [state]
    current = state
    for _ in range(steps):
        current = band_step(current, h)
        w_minus, w_plus = band_barriers(v0_min, v0_max, current.N, current.t)
        if current.v.min() < w_minus * (1.0 - BARRIER_ESCAPE_RTOL) or current.v.max() > w_plus * (1.0 + BARRIER_ESCAPE_RTOL):
            raise StabilityViolation(
                f"v in [{current.v.min():.6g}, {current.v.max():.6g}] left the barriers "
                f"[{w_minus:.6g}, {w_plus:.6g}] at t={current.t:.6g}"
            )
        states.append(current)
    return states


def band_evolve(
    state: BandState,
    dt: float = DEFAULT_BAND_DT,
    max_halvings: int = MAX_BAND_HALVINGS,
) -> Tuple[BandState, List[BandState]]:
    """
    Evolve to t = 1 with uniform steps no larger than min(dt, band_suggest_dt).

    A run that loses positivity, produces NaN/inf or leaves the barriers is
    restarted with half the step (uniform spacing is kept for the t-stencils
    of the curvature oracle).

    Raises:
        StabilityViolation / NonFinite: still unstable after max_halvings restarts
    """
    h = min(dt, band_suggest_dt(state))
    steps = max(1, int(math.ceil((1.0 - state.t) / h - 1e-9)))
    halvings = 0
    while True:
        try:
            states = _uniform_run(state, steps)
            break
        except (StabilityViolation, NonFinite) as e:
            halvings += 1
            if halvings > max_halvings:
                raise
            logger.warning(f"[BAND] {e.message}; restarting with {2 * steps} steps")
            steps *= 2
    current = states[-1]
    logger.info(f"[BAND] Evolved to t=1 in {steps} steps: v in [{current.v.min():.6g}, {current.v.max():.6g}]")
    return current, states


def band_total_mean_curvature(state: BandState) -> float:
    """int 1/2 tr_{gamma_t} Q / v dvol_{gamma_t}."""
    volume = math.sqrt(float(linalg.det(state.gamma_t)))
    return volume * float(np.mean(0.5 * state.trace_q / state.v.values))


# =============================================================================
# Closed-form curvature and references
# =============================================================================

def band_closed_form_curvature(state: BandState, v_t: ScalarField) -> ScalarField:
    """
    R of v^2 dt^2 + gamma_t from the Riccati identity (flat gamma_t):

        R = -2 v^-1 Delta_{gamma_t} v + v^-2 (3/4 |Q|^2 - 1/4 (tr Q)^2) + v^-3 tr Q dv/dt
    """
    v = state.v.values
    ops = _band_operators(state, state.t)
    lap = ops.inverse(ops.laplacian_symbol * ops.forward(v))
    S = linalg.solve(state.gamma_t, state.Q, assume_a="pos")
    curv = 0.75 * np.trace(S @ S) - 0.25 * np.trace(S) ** 2
    R = -2.0 * lap / v + curv / v ** 2 + np.trace(S) * v_t.values / v ** 3
    return state.v.with_values(R)


def band_time_derivative(state: BandState) -> ScalarField:
    """dv/dt from the band equation."""
    v = state.v.values
    ops = _band_operators(state, state.t)
    lap = ops.inverse(ops.laplacian_symbol * ops.forward(v))
    a = 2.0 / state.trace_q
    r_hat = unperturbed_band_curvature(state.gamma_hat, state.gamma, state.t)
    return state.v.with_values(a * (v ** 2 * lap - 0.5 * r_hat * v))


def band_ode_reference(
    v0: float,
    gamma_hat: FlatTorusMetric,
    gamma: FlatTorusMetric,
    t: float,
) -> float:
    """Spatially constant lapse at t from DOP853 on dv/dt = -R_hat(t) v / tr_{gamma_t} Q."""
    def rhs(s, y):
        return [-unperturbed_band_curvature(gamma_hat, gamma, s) / trace_q(gamma_hat, gamma, s) * y[0]]

    if t == 0.0:
        return float(v0)
    sol = integrate.solve_ivp(rhs, (0.0, t), [v0], method="DOP853", rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1])


# =============================================================================
# Verification
# =============================================================================

@dataclass
class BandReport:
    """
    Items of the band properties checked on a trace.

    Attributes:
        items: item name -> passed
        rows: per-state diagnostics (band trace CSV)
        details: numbers behind each item
    """
    items: Dict[str, bool]
    rows: List[Dict[str, float]]
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.items.values())

    @property
    def failures(self) -> List[str]:
        return [name for name, ok in self.items.items() if not ok]

    def csv_rows(self) -> List[Tuple[float, ...]]:
        return [tuple(row[c] for c in BAND_TRACE_COLUMNS) for row in self.rows]

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {"passed": self.passed, "items": dict(self.items), "failures": self.failures, "details": self.details}


def verify_band(
    states: List[BandState],
    h: ScalarField,
    fd_every: int = 64,
    fd_nodes: Optional[List[Tuple[int, ...]]] = None,
    fd_tolerance: float = 1e-3,
) -> BandReport:
    """
    Check the band properties on a completed trace.

    (i) endpoint metrics, (ii) H(t=0) = h, (iii) H > 0 throughout,
    (iv) R_g = -K by the fd oracle every ``fd_every`` states, (v) total mean
    curvature non-decreasing; plus barrier containment at every state.
    """

    first, last = states[0], states[-1]
    items: Dict[str, bool] = {}
    details: Dict[str, Any] = {}

    items["endpoint_metrics"] = bool(
        first.t == 0.0
        and abs(last.t - 1.0) < 1e-12
        and np.allclose(first.gamma_t, first.gamma_hat.gram, rtol=0.0, atol=1e-14)
        and np.allclose(last.gamma_t, last.gamma.gram, rtol=1e-14, atol=1e-14)
    )

    h_dev = float(np.max(np.abs(first.mean_curvature().values - h.values)))
    items["initial_mean_curvature"] = h_dev <= 1e-12 * max(1.0, h.max_abs())
    details["initial_mean_curvature_dev"] = h_dev

    v0_min, v0_max = first.v.min(), first.v.max()
    if fd_nodes is None:
        fd_nodes = [(0,) * first.v.grid.dim]
    fd_indices = set(range(0, len(states), max(1, fd_every))) | {len(states) - 1}

    rows = []
    min_h = float("inf")
    barrier_ok = True
    fd_max_dev = 0.0
    fd_max_err = 0.0
    for k, s in enumerate(states):
        w_minus, w_plus = band_barriers(v0_min, v0_max, s.N, s.t)
        tol = 1e-10 * max(1.0, w_plus)
        if s.v.min() < w_minus - tol or s.v.max() > w_plus + tol:
            barrier_ok = False
        min_h = min(min_h, s.mean_curvature().min())
        fd_dev = float("nan")
        if k in fd_indices and len(states) >= 17:
            fd = band_scalar_curvature(states, k, fd_nodes)
            values = fd["R"].values[~np.isnan(fd["R"].values)]
            fd_dev = float(np.max(np.abs(values + s.K)))
            fd_max_dev = max(fd_max_dev, fd_dev)
            fd_max_err = max(fd_max_err, fd["max_error_estimate"])
        rows.append({
            "t": s.t,
            "min_v": s.v.min(),
            "max_v": s.v.max(),
            "w_minus": w_minus,
            "w_plus": w_plus,
            "total_mean_curvature": band_total_mean_curvature(s),
            "fd_R_max_dev": fd_dev,
        })

    items["positive_mean_curvature"] = min_h > 0.0
    details["min_mean_curvature"] = min_h
    items["scalar_curvature"] = fd_max_dev <= max(fd_tolerance, 3.0 * fd_max_err)
    details["fd_R_max_dev"] = fd_max_dev
    details["fd_R_max_error_estimate"] = fd_max_err

    tmc = np.array([r["total_mean_curvature"] for r in rows])
    increments = np.diff(tmc)
    items["total_mean_curvature_monotone"] = bool(np.all(increments >= -1e-12 * (1.0 + np.abs(tmc[:-1]))))
    details["total_mean_curvature"] = [float(tmc[0]), float(tmc[-1])]
    details["total_mean_curvature_strict"] = bool(tmc[-1] > tmc[0])
    items["barriers"] = barrier_ok

    report = BandReport(items=items, rows=rows, details=details)
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"[BAND] verify: {report.to_dict()}")
    return report


# =============================================================================
# Composition with the fill-in bound
# =============================================================================

@dataclass
class CompositionReport:
    """
    int H_hat dvol_gamma_hat against the outer data (gamma, H_g(1)) after the band.

    The outer data is flowed to its mass aspect, so the chain
    1/2 inner_total <= outer_total <= vol_gamma (n-1)(1 - mu0) is checked
    numerically next to the systole bound of the outer data.
    """
    inner_total: float
    outer_total: float
    ratio: float
    outer_bound: BoundVerdict
    band: BandReport
    outer_flow: PipelineReport
    composed_bound: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "inner_total": self.inner_total,
            "outer_total": self.outer_total,
            "ratio": self.ratio,
            "outer_bound": self.outer_bound.to_dict(),
            "band": self.band.to_dict(),
            "outer_flow": self.outer_flow.to_dict(),
            "composed_bound": self.composed_bound,
            "passed": self.passed,
        }


# Relative slack on the composed chain (discretisation of the band and flow)
COMPOSE_RTOL = 1e-6


def compose_interpolation(
    gamma_hat: FlatTorusMetric,
    gamma: FlatTorusMetric,
    H_hat: ScalarField,
    n: int,
    dt: float = DEFAULT_BAND_DT,
    rho_target: float = 100.0,
    controls: SolverControls = DEFAULT_CONTROLS,
) -> Tuple[CompositionReport, List[BandState]]:
    """
    Band with h = H_hat / 2, then the flow on the outer data (gamma, H_g(1)).

    The band halves the boundary mean curvature at t = 0, so
    1/2 int H_hat dvol_gamma_hat <= int H_g(1) dvol_gamma; the flow from
    u0 = (n-1) / H_g(1) gives mean(H_g(1)) <= (n-1)(1 - mu0).
    """
    h = H_hat.with_values(0.5 * H_hat.values)
    state = init_band(gamma_hat, gamma, h)
    final, states = band_evolve(state, dt)
    band = verify_band(states, h)
    inner = integrate_field(H_hat)
    outer = band_total_mean_curvature(final)

    H_outer = ScalarField(make_grid(gamma, final.v.grid.resolution), final.mean_curvature().values)
    pipeline, _ = systole_bound_pipeline(H_outer, n, rho_target, controls)
    composed_bound = gamma.volume * (n - 1) * (1.0 - pipeline.mass.mu0)
    tol = COMPOSE_RTOL * max(1.0, abs(outer))
    passed = (
        band.passed
        and pipeline.inequality.passed
        and 0.5 * inner <= outer + tol
        and outer <= composed_bound + tol
    )
    report = CompositionReport(
        inner_total=inner,
        outer_total=outer,
        ratio=inner / outer,
        outer_bound=pipeline.bound,
        band=band,
        outer_flow=pipeline,
        composed_bound=composed_bound,
        passed=passed,
    )
    logger.info(
        f"[BAND] composed: inner {inner:.8g}, outer {outer:.8g}, ratio {report.ratio:.6g}, "
        f"flow bound {composed_bound:.8g} (mu0 {pipeline.mass.mu0:.6g}) -> {'PASS' if passed else 'FAIL'}"
    )
    return report, states


def total_mean_curvature_bound(gamma_hat: FlatTorusMetric, n: int, scale: float) -> float:
    """
    Upper bound on int H_hat dvol_gamma_hat for fill-ins of gamma_hat, via gamma = scale * gamma_hat:

        2 vol_gamma ((n-1) + 1/2 (4 pi / (n sigma_gamma))^n)
    """
    if scale <= 1.0:
        raise NotDominated(f"scale must exceed 1 so that gamma > gamma_hat, got {scale}")
    gamma = gamma_hat.scaled(scale)
    _, rhs = systole_bound(gamma, n)
    return 2.0 * gamma.volume * ((n - 1) + rhs)
