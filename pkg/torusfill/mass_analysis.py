"""
Mass Analysis: Monotone Functional, Mass Aspect and Almost-CMC Slices

Along the flow u(x, rho):
- F(rho) = rho^n / vol * int (n-1)(1 - 1/u) dvol_gamma is non-increasing, with
  rho F'(rho) equal to the dissipation -(n(n-1)/2) rho^n / vol * int (1-u)^2/u.
- psi = rho^n (u - 1) converges to the mass aspect mu(x), with psi - mu = O(rho^-2).
- mu0 = mean(mu); f solves Delta_gamma f = (n-1)(mu0 - mu) with zero mean.
- The surface rho = lambda + lambda^(3-n) f has mean curvature
  (n-1)(1 - lambda^-n mu0) + o(lambda^-n).

Also hosts the boundary bound 1/2 (4 pi / (n sigma))^n and the pipeline that
feeds boundary data (gamma, H) through the flow.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import NotConverged, NotZeroMean, SurfaceOutOfRange
from .flow_solver import (
    DEFAULT_CONTROLS,
    FlowState,
    FlowTrace,
    SolverControls,
    dissipation_value,
    evolve_to_convergence,
    init_state,
    initial_data_from_mean_curvature,
    mass_functional_value,
)
from .lattice_torus import FlatTorusMetric, winding_systole
from .spectral_field import (
    ScalarField,
    constant_field,
    gradient,
    hessian,
    laplacian,
    mean,
    poisson_solve_zero_mean,
)

logger = logging.getLogger(__name__)

# Relative tolerance for the zero-mean precondition on f
ZERO_MEAN_RTOL = 1e-10
DEFAULT_FIT_RANGE = (10.0, 100.0)


# =============================================================================
# Slice quantities
# =============================================================================

def mean_curvature_field(state: FlowState) -> ScalarField:
    """H of Sigma_rho: pointwise (n-1)/u."""
    return state.slice_mean_curvature()


def mass_functional(state: FlowState) -> float:
    """Normalised F(rho); 0 for u = 1."""
    return mass_functional_value(state)


def dissipation(state: FlowState) -> float:
    """rho dF/drho along the flow; <= 0 with equality iff u = 1."""
    return dissipation_value(state)


def monotone_quantity(state: FlowState) -> float:
    """Un-normalised int ((n-1) - H) rho dvol_{Sigma_rho} (= vol_gamma * F)."""
    return state.metric.volume * mass_functional_value(state)


# =============================================================================
# Mass aspect
# =============================================================================

@dataclass(frozen=True, eq=False)
class MassReport:
    """
    Mass aspect extracted from a converged trace.

    Attributes:
        n: dimension
        mu: mass aspect field
        mu0: mean of mu
        f: zero-mean solution of Delta f = (n-1)(mu0 - mu)
        fit_exponent_psi: log-log slope of max|psi - mu| over the fit window
        F_initial: F at the first trace record
        F_limit: F at the last trace record
        extrapolation_rhos: the two checkpoint radii used for mu
    """
    n: int
    mu: ScalarField
    mu0: float
    f: ScalarField
    fit_exponent_psi: float
    F_initial: float
    F_limit: float
    extrapolation_rhos: Tuple[float, float]

    def to_dict(self, mu_ref: Optional[str] = "mu.bin", f_ref: Optional[str] = "f.bin") -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "n": self.n,
            "mu0": self.mu0,
            "F_initial": self.F_initial,
            "F_limit": self.F_limit,
            "F_limit_expected": (self.n - 1) * self.mu0,
            "fit_exponent_psi": None if math.isnan(self.fit_exponent_psi) else self.fit_exponent_psi,
            "mu_min": self.mu.min(),
            "mu_max": self.mu.max(),
            "f_max_abs": self.f.max_abs(),
            "extrapolation_rhos": list(self.extrapolation_rhos),
            "fields": {"mu": mu_ref, "f": f_ref},
        }


def _fit_exponent(rhos: Sequence[float], values: Sequence[float]) -> float:
    rhos = np.asarray(rhos, dtype=float)
    values = np.asarray(values, dtype=float)
    if rhos.size < 3 or np.any(values <= 0.0):
        return float("nan")
    return float(stats.linregress(np.log(rhos), np.log(values)).slope)


def richardson_mass_aspect(older: FlowState, newer: FlowState) -> ScalarField:
    """mu from two states assuming psi = mu + a rho^-2."""
    r1, r2 = older.rho ** 2, newer.rho ** 2
    values = (r2 * newer.psi.values - r1 * older.psi.values) / (r2 - r1)
    return newer.v.with_values(values)


def _solve_for_f(mu: ScalarField, mu0: float, n: int) -> ScalarField:
    deviation = mu0 - mu.values
    if np.max(np.abs(deviation)) <= 1e-14 * max(1.0, abs(mu0)):
        return constant_field(mu.grid, 0.0)
    rhs = (n - 1) * deviation
    rhs = rhs - rhs.mean()
    return poisson_solve_zero_mean(mu.with_values(rhs))


def extract_mass_aspect(
    trace: FlowTrace,
    fit_range: Tuple[float, float] = DEFAULT_FIT_RANGE,
) -> MassReport:
    """
    mu, mu0 and f from a converged trace.

    mu is Richardson-extrapolated in rho^-2 from the last two checkpoints.

    Raises:
        NotConverged: psi stopping rule not met or fewer than 3 checkpoints
    """
    if not trace.converged:
        raise NotConverged("Trace did not satisfy the psi stopping rule")
    if len(trace.checkpoints) < 3:
        raise NotConverged(f"Need at least 3 checkpoints, found {len(trace.checkpoints)}")

    older, newer = trace.checkpoints[-2], trace.checkpoints[-1]
    mu = richardson_mass_aspect(older, newer)
    mu0 = mean(mu)
    f = _solve_for_f(mu, mu0, trace.n)

    window = [c for c in trace.checkpoints[:-2] if fit_range[0] <= c.rho <= fit_range[1]]
    if len(window) < 3:
        window = trace.checkpoints[:-2]
    deviations = [float(np.max(np.abs(c.psi.values - mu.values))) for c in window]
    exponent = _fit_exponent([c.rho for c in window], deviations)

    report = MassReport(
        n=trace.n,
        mu=mu,
        mu0=mu0,
        f=f,
        fit_exponent_psi=exponent,
        F_initial=trace.records[0].F,
        F_limit=trace.records[-1].F,
        extrapolation_rhos=(older.rho, newer.rho),
    )
    logger.info(
        f"[MASS] mu0={mu0:.10g} (mu in [{mu.min():.6g}, {mu.max():.6g}]), "
        f"F: {report.F_initial:.10g} -> {report.F_limit:.10g}, psi fit exponent {exponent:.3f}"
    )
    return report


def mass_expansion_residual(
    trace: FlowTrace,
    report: MassReport,
    fit_range: Tuple[float, float] = DEFAULT_FIT_RANGE,
) -> List[Dict[str, float]]:
    """
    Scaled residuals of the expansions u = 1 + mu rho^-n and H = (n-1)(1 - mu rho^-n).

    Each row holds rho^(n+2) sup|u - 1 - mu rho^-n| and the same for H; both
    stay bounded when the expansions hold with an O(rho^-n-2) remainder.
    """
    n = trace.n
    rows = []
    for c in trace.checkpoints:
        if not fit_range[0] <= c.rho <= fit_range[1]:
            continue
        scale = c.rho ** (n + 2)
        predicted = report.mu.values * c.rho ** -n
        u_res = float(np.max(np.abs(c.v.values - predicted)))
        h = (n - 1) / (1.0 + c.v.values)
        h_res = float(np.max(np.abs(h - (n - 1) * (1.0 - predicted))))
        rows.append({"rho": c.rho, "u_residual_scaled": u_res * scale, "H_residual_scaled": h_res * scale})
    return rows


# =============================================================================
# Almost-CMC slices
# =============================================================================

def _lagrange_weights(t_nodes: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights, shape (4, *t.shape), nodes shape (4, *t.shape)."""
    weights = []
    for i in range(4):
        w = np.ones_like(t)
        for j in range(4):
            if j != i:
                w = w * (t - t_nodes[j]) / (t_nodes[i] - t_nodes[j])
        weights.append(w)
    return np.stack(weights)


class _CheckpointInterpolator:
    """Per-node cubic interpolation in log rho of psi, its gradient and Laplacian."""

    def __init__(self, trace: FlowTrace):
        ckpts = trace.checkpoints
        if len(ckpts) < 4:
            raise SurfaceOutOfRange(f"Need at least 4 checkpoints for interpolation, found {len(ckpts)}")
        self.n = trace.n
        self.log_rhos = np.array([c.log_rho for c in ckpts])
        self.psi = np.stack([c.psi.values for c in ckpts])
        grads = [gradient(c.psi) for c in ckpts]
        self.grad = [np.stack([g[a].values for g in grads]) for a in range(len(grads[0]))]
        self.lap = np.stack([laplacian(c.psi).values for c in ckpts])

    @property
    def rho_range(self) -> Tuple[float, float]:
        return float(math.exp(self.log_rhos[0])), float(math.exp(self.log_rhos[-1]))

    def _stencil(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k = self.log_rhos.size
        start = np.clip(np.searchsorted(self.log_rhos, t) - 2, 0, k - 4)
        idx = np.stack([start + i for i in range(4)])
        return idx, self.log_rhos[idx]

    def _interp(self, stack: np.ndarray, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
        picked = np.take_along_axis(stack, idx, axis=0)
        return np.sum(weights * picked, axis=0)

    def evaluate(self, rho: np.ndarray) -> Dict[str, Any]:
        """u, spatial gradient of u and Delta_gamma u at fixed rho, per node."""
        t = np.log(rho)
        idx, nodes = self._stencil(t)
        weights = _lagrange_weights(nodes, t)
        scale = rho ** -self.n
        return {
            "u": 1.0 + scale * self._interp(self.psi, idx, weights),
            "du": [scale * self._interp(g, idx, weights) for g in self.grad],
            "lap_u": scale * self._interp(self.lap, idx, weights),
        }


def perturbed_slice_mean_curvature(trace: FlowTrace, lam: float, f: ScalarField) -> ScalarField:
    """
    Mean curvature of the surface rho = lam + lam^(3-n) f(x).

    Uses the level-set formula for phi = rho - lam - eps f (eps = lam^(3-n)):

        H = (Delta phi - D^2 phi(grad phi, grad phi) / P) / sqrt(P),  P = |grad phi|^2,

    with D^2 phi(grad phi, grad phi) = 1/2 grad phi . grad P and every term
    written in the components of g = rho^2 gamma + u^2 rho^-2 drho^2. u and
    its x-derivatives come from cubic interpolation of psi across checkpoints
    in log rho; du/drho comes from the PDE.

    Raises:
        NotZeroMean: |mean f| > 1e-10 max(1, max|f|)
        SurfaceOutOfRange: surface leaves the checkpoint range
    """
    avg = mean(f)
    if abs(avg) > ZERO_MEAN_RTOL * max(1.0, f.max_abs()):
        raise NotZeroMean(f"f must have zero mean (mean = {avg:.3e})", details={"mean": avg})

    n = trace.n
    interp = _CheckpointInterpolator(trace)
    eps = lam ** (3 - n)
    rho = lam + eps * f.values
    lo, hi = interp.rho_range
    if np.min(rho) < lo or np.max(rho) > hi:
        raise SurfaceOutOfRange(
            f"Surface rho in [{np.min(rho):.6g}, {np.max(rho):.6g}] leaves checkpoint range [{lo:.6g}, {hi:.6g}]",
            details={"lambda": lam, "range": [lo, hi]},
        )

    g_inv = f.grid.metric.inverse
    d = f.grid.dim
    q = interp.evaluate(rho)
    u = q["u"]
    du = q["du"]
    # rho du/drho from the PDE
    rho_u_rho = u ** 2 / (n - 1) * rho ** -2 * q["lap_u"] + 0.5 * n * (u - u ** 3)
    u_rho = rho_u_rho / rho

    df = [g.values for g in gradient(f)]
    ddf = [[h.values for h in row] for row in hessian(f)]
    lap_f = laplacian(f).values
    df_sharp = [sum(g_inv[i, j] * df[j] for j in range(d)) for i in range(d)]
    df_norm_sq = sum(df_sharp[i] * df[i] for i in range(d))
    du_df = sum(df_sharp[i] * du[i] for i in range(d))

    p = u ** -2 * rho ** 2 + eps ** 2 * rho ** -2 * df_norm_sq
    dp_rho = -2.0 * u ** -3 * u_rho * rho ** 2 + 2.0 * u ** -2 * rho - 2.0 * eps ** 2 * rho ** -3 * df_norm_sq
    dp_x = [
        -2.0 * u ** -3 * du[i] * rho ** 2
        + 2.0 * eps ** 2 * rho ** -2 * sum(ddf[i][j] * df_sharp[j] for j in range(d))
        for i in range(d)
    ]
    grad_phi_rho = u ** -2 * rho ** 2
    grad_phi_x = [-eps * rho ** -2 * df_sharp[i] for i in range(d)]

    lap_phi = -u ** -3 * u_rho * rho ** 2 + n * u ** -2 * rho - eps * rho ** -2 * (lap_f + du_df / u)
    hess_phi_nn = 0.5 * (grad_phi_rho * dp_rho + sum(grad_phi_x[i] * dp_x[i] for i in range(d)))
    H = (lap_phi - hess_phi_nn / p) / np.sqrt(p)
    return f.with_values(H)


def almost_cmc_deviation(trace: FlowTrace, report: MassReport, lam: float) -> float:
    """max |H - (n-1)(1 - lam^-n mu0)| over the perturbed slice at lam."""
    H = perturbed_slice_mean_curvature(trace, lam, report.f)
    target = (trace.n - 1) * (1.0 - lam ** -trace.n * report.mu0)
    return float(np.max(np.abs(H.values - target)))


def almost_cmc_sweep(
    trace: FlowTrace,
    report: MassReport,
    lambdas: Sequence[float],
) -> Tuple[List[Dict[str, float]], float]:
    """Deviation rows (lambda, deviation) and their fitted decay exponent."""
    rows = []
    for lam in lambdas:
        dev = almost_cmc_deviation(trace, report, lam)
        rows.append({"lambda": float(lam), "deviation": dev, "scaled": dev * lam ** trace.n})
        logger.debug(f"[MASS] almost-CMC lambda={lam:.4g}: deviation {dev:.3e}")
    exponent = _fit_exponent([r["lambda"] for r in rows], [r["deviation"] for r in rows])
    logger.info(f"[MASS] almost-CMC deviation exponent {exponent:.3f} over {len(rows)} slices")
    return rows, exponent


# =============================================================================
# Monotonicity / main inequality
# =============================================================================

@dataclass
class MainInequalityReport:
    """
    Outcome of the monotonicity and limit checks on one trace.

    Attributes:
        passed: every check succeeded
        F_initial, F_limit: F at the first and last records
        limit_expected: (n-1) mu0
        limit_slack: tolerance minus |F_limit - (n-1) mu0|
        min_initial_slack: min over records of F_initial - F(rho)
        max_increase: largest step-to-step increase of F (<= round-off when monotone)
        strict_failures: steps where F failed to decrease although the
            dissipation predicted a resolvable decrease
        failures: names of failed checks
    """
    passed: bool
    F_initial: float
    F_limit: float
    limit_expected: float
    limit_slack: float
    min_initial_slack: float
    max_increase: float
    strict_failures: int
    failures: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "passed": self.passed,
            "F_initial": self.F_initial,
            "F_limit": self.F_limit,
            "limit_expected": self.limit_expected,
            "limit_slack": self.limit_slack,
            "min_initial_slack": self.min_initial_slack,
            "max_increase": self.max_increase,
            "strict_failures": self.strict_failures,
            "failures": list(self.failures),
        }


def check_main_inequality(trace: FlowTrace, report: Optional[MassReport] = None) -> MainInequalityReport:
    """
    F(rho0) >= F(rho) for all logged rho and F_limit = (n-1) mu0.

    Raises:
        NotConverged: trace did not satisfy the psi stopping rule
    """
    if report is None:
        report = extract_mass_aspect(trace)
    F = trace.column("F")
    D = trace.column("dissipation")
    dt = trace.column("dt_log")
    F0 = float(F[0])
    F_limit = float(F[-1])
    round_off = 1e-12 * (1.0 + np.abs(F[:-1]))

    increments = np.diff(F)
    max_increase = float(np.max(increments)) if increments.size else 0.0
    min_initial_slack = float(np.min(F0 - F))
    # decrease predicted by the dissipation over each step
    predicted = np.abs(D[1:]) * dt[1:]
    resolvable = predicted > 1e3 * np.finfo(float).eps * (1.0 + np.abs(F[1:]))
    strict_failures = int(np.sum(resolvable & (increments >= 0.0)))

    expected = (trace.n - 1) * report.mu0
    tol = 1e-4 * (1.0 + abs(F0))
    limit_slack = tol - abs(F_limit - expected)

    failures = []
    if np.any(increments > round_off):
        failures.append("monotone")
    if min_initial_slack < -1e-12 * (1.0 + abs(F0)):
        failures.append("initial_dominates")
    if strict_failures:
        failures.append("strict_decrease")
    if limit_slack < 0.0:
        failures.append("limit")

    result = MainInequalityReport(
        passed=not failures,
        F_initial=F0,
        F_limit=F_limit,
        limit_expected=expected,
        limit_slack=limit_slack,
        min_initial_slack=min_initial_slack,
        max_increase=max_increase,
        strict_failures=strict_failures,
        failures=failures,
    )
    level = logging.INFO if result.passed else logging.WARNING
    logger.log(level, f"[MASS] main inequality {'passed' if result.passed else 'FAILED'}: {result.to_dict()}")
    return result


def dissipation_identity_errors(trace: FlowTrace) -> List[Dict[str, float]]:
    """
    |rho dF/drho - dissipation| at checkpoints, rho dF/drho by centred differences in log rho.
    """
    t = np.log(trace.rhos)
    F = trace.column("F")
    D = trace.column("dissipation")
    checkpoint_rhos = set(float(r) for r in trace.checkpoint_rhos)
    rows = []
    for k in range(1, len(t) - 1):
        if float(trace.records[k].rho) not in checkpoint_rhos:
            continue
        h0, h1 = t[k] - t[k - 1], t[k + 1] - t[k]
        # non-uniform three-point derivative
        derivative = (
            -h1 / (h0 * (h0 + h1)) * F[k - 1]
            + (h1 - h0) / (h0 * h1) * F[k]
            + h0 / (h1 * (h0 + h1)) * F[k + 1]
        )
        rows.append({
            "rho": float(trace.records[k].rho),
            "derivative": float(derivative),
            "dissipation": float(D[k]),
            "abs_error": float(abs(derivative - D[k])),
        })
    return rows


# =============================================================================
# Boundary bound
# =============================================================================

ADMISSIBLE = "ADMISSIBLE"
EXCLUDED = "EXCLUDED"


def systole_bound(metric: FlatTorusMetric, n: int) -> Tuple[float, float]:
    """(sigma, 1/2 (4 pi / (n sigma))^n) for the winding systole sigma."""
    sigma = winding_systole(metric)
    return sigma, 0.5 * (4.0 * math.pi / (n * sigma)) ** n


@dataclass(frozen=True)
class BoundVerdict:
    """
    Boundary data against the fill-in bound.

    lhs = mean(H) - (n-1), rhs = 1/2 (4 pi / (n sigma))^n, slack = rhs - lhs.
    EXCLUDED means no fill-in with R >= -n(n-1) and H > 0 exists.
    """
    n: int
    sigma: float
    lhs: float
    rhs: float
    slack: float
    verdict: str

    @property
    def relative_slack(self) -> float:
        return self.slack / self.rhs

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "n": self.n,
            "sigma": self.sigma,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "relative_slack": self.relative_slack,
            "verdict": self.verdict,
        }


def evaluate_bound(metric: FlatTorusMetric, n: int, H_mean: float) -> BoundVerdict:
    sigma, rhs = systole_bound(metric, n)
    lhs = H_mean - (n - 1)
    slack = rhs - lhs
    return BoundVerdict(n=n, sigma=sigma, lhs=lhs, rhs=rhs, slack=slack, verdict=ADMISSIBLE if slack >= 0.0 else EXCLUDED)


@dataclass
class PipelineReport:
    """Boundary data pushed through the flow: F(rho0) >= (n-1) mu0 next to the bound."""
    bound: BoundVerdict
    mass: MassReport
    inequality: MainInequalityReport
    epsilon: float

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "bound": self.bound.to_dict(),
            "mass": self.mass.to_dict(),
            "inequality": self.inequality.to_dict(),
            "epsilon": self.epsilon,
            "minus_F_initial": -self.inequality.F_initial,
            "minus_limit": -self.inequality.limit_expected,
        }


def systole_bound_pipeline(
    H: ScalarField,
    n: int,
    rho_target: float = 100.0,
    controls: SolverControls = DEFAULT_CONTROLS,
    epsilon: float = 0.0,
) -> Tuple[PipelineReport, FlowTrace]:
    """
    Flow the boundary data (gamma, H) from rho0 = 1 with u0 = (1-eps)^-1 (n-1)/H.

    At rho0 = 1 and eps = 0, -F(1) is the bound's lhs, and monotonicity gives
    lhs <= -(n-1) mu0.
    """
    u0 = initial_data_from_mean_curvature(H, n, epsilon)
    state = init_state(u0, 1.0, n)
    _, trace = evolve_to_convergence(state, rho_target, controls)
    report = extract_mass_aspect(trace)
    inequality = check_main_inequality(trace, report)
    bound = evaluate_bound(H.grid.metric, n, mean(H))
    return PipelineReport(bound=bound, mass=report, inequality=inequality, epsilon=epsilon), trace
