"""
CLI Runner: Reproducible Experiment Driver

Runs one validated RunConfig per invocation and writes its outputs through
RunArtifactStore:

    flow        trace.csv, checkpoints.csv, checkpoint_NNN_u.bin, mass_report.json,
                mu.bin, f.bin, verdict.json
    band        band_trace.csv, verdict.json
    hm_sweep    hm_sweep.csv, verdict.json
    bound_check verdict.json
    validate    verdict.json

Every run ends with manifest.json (config echo, provenance, stage timings,
artifact hashes, embedded checks, failures). Exit codes: 0 all checks pass,
2 a check failed or the computation raised, 3 configuration error.
"""

from __future__ import annotations

import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .curvature_oracle import (
    certify_flow_curvature,
    fd_scalar_curvature,
    product_sample,
    warped_sample_from_function,
)
from .errors import ConfigError, InvariantViolation, TorusFillError
from .files import RunArtifactStore, read_field
from .flow_solver import FlowTrace, TraceRecord, evolve_to, init_state, initial_data_from_mean_curvature
from .hm_benchmark import HM_SWEEP_COLUMNS, HMModel, certify_hm_curvature, hm_sweep
from .interpolation_band import (
    BAND_TRACE_COLUMNS,
    band_evolve,
    band_ode_reference,
    init_band,
    verify_band,
)
from .lattice_torus import FlatTorusMetric, Grid, make_flat_metric, make_grid
from .mass_analysis import (
    BoundVerdict,
    almost_cmc_sweep,
    check_main_inequality,
    dissipation_identity_errors,
    evaluate_bound,
    extract_mass_aspect,
)
from .provenance import RunProvenance, sha256_json
from .schemas import Experiment, FieldKind, InitialDataSpec, RunConfig
from .spectral_field import ScalarField, constant_field, field_from_function, mean
from .telemetry import StageRecord, StageTimer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_CONFIG = 3

DEFAULT_OUTPUT_ROOT = "runs"


# =============================================================================
# Inputs
# =============================================================================

def build_metric(gram: Sequence[Sequence[float]]) -> FlatTorusMetric:
    """A Gram matrix from a config; invalid matrices are config errors."""
    try:
        return make_flat_metric(np.array(gram, dtype=float))
    except ValueError as e:
        raise ConfigError(f"Invalid Gram matrix {gram}: {e}") from e


def build_field(spec: InitialDataSpec, grid: Grid, seed: int = 0) -> ScalarField:
    """Realise an InitialDataSpec on a grid (random fields are seeded)."""
    if spec.kind == FieldKind.CONSTANT:
        return constant_field(grid, spec.value)
    if spec.kind == FieldKind.COSINE:
        mode = np.array(spec.mode or [1] + [0] * (grid.dim - 1), dtype=float)
        if mode.size != grid.dim:
            raise ConfigError(f"cosine mode {spec.mode} does not match torus dimension {grid.dim}")

        def cosine(*x):
            phase = sum(mode[a] * x[a] for a in range(grid.dim))
            return spec.value + spec.amplitude * np.cos(2.0 * math.pi * phase)

        return field_from_function(grid, cosine)
    if spec.kind == FieldKind.RANDOM:
        rng = np.random.default_rng(seed)
        coords = grid.coordinates()
        total = np.zeros(grid.resolution)
        for k in np.ndindex(*([2 * spec.max_mode + 1] * grid.dim)):
            m = np.array(k) - spec.max_mode
            if not m.any():
                continue
            phase = 2.0 * math.pi * sum(m[a] * coords[a] for a in range(grid.dim))
            a, b = rng.standard_normal(2)
            total = total + a * np.cos(phase) + b * np.sin(phase)
        total = total / max(float(np.max(np.abs(total))), 1e-300)
        return ScalarField(grid, spec.value * (1.0 + spec.amplitude * total))
    loaded = read_field(spec.path, grid.metric)
    if loaded.grid.resolution != grid.resolution:
        raise ConfigError(f"Field file {spec.path} has resolution {loaded.grid.resolution}, expected {grid.resolution}")
    return loaded


def resolve_output_dir(config: RunConfig, flag: Optional[str] = None) -> Path:
    """config.output_dir > --output flag > TORUSFILL_OUTPUT_ROOT > ./runs, one sub-directory per config hash."""
    if config.output_dir:
        return Path(config.output_dir)
    root = flag or os.environ.get("TORUSFILL_OUTPUT_ROOT") or DEFAULT_OUTPUT_ROOT
    digest = sha256_json(config.model_dump(mode="json"))[:12]
    return Path(root) / f"{config.experiment.value}-{digest}"


# =============================================================================
# Bound check
# =============================================================================

def bound_check(gram: Union[FlatTorusMetric, Sequence[Sequence[float]]], n: int, H_data: Union[float, ScalarField]) -> BoundVerdict:
    """
    Compare boundary data against 1/2 (4 pi / (n sigma))^n.

    H_data is a positive constant or a field; lhs uses its gamma-average.
    """
    metric = gram if isinstance(gram, FlatTorusMetric) else build_metric(gram)
    if isinstance(H_data, ScalarField):
        if H_data.min() <= 0.0:
            raise ConfigError(f"H must be positive (min H = {H_data.min():.6g})")
        H_mean = mean(H_data)
    else:
        if H_data <= 0.0:
            raise ConfigError(f"H must be positive, got {H_data}")
        H_mean = float(H_data)
    verdict = evaluate_bound(metric, n, H_mean)
    logger.info(
        f"[RUN] bound check: lhs={verdict.lhs:.10g} rhs={verdict.rhs:.10g} "
        f"slack={verdict.slack:.6g} -> {verdict.verdict}"
    )
    return verdict


# =============================================================================
# Experiments
# =============================================================================

class RunContext:
    """What an experiment needs: config, store, and the check/stage ledgers."""

    def __init__(self, config: RunConfig, store: RunArtifactStore):
        self.config = config
        self.store = store
        self.checks: Dict[str, Dict[str, Any]] = {}
        self.stages: List[StageRecord] = []

    def stage(self, name: str) -> StageTimer:
        return StageTimer(name, self.stages)

    def check(self, name: str, ok: bool, /, **values: Any) -> bool:
        """Record a named check; a "passed" entry in values is overridden by ok."""
        self.checks[name] = {**values, "passed": bool(ok)}
        if not ok:
            logger.warning(f"[RUN] check {name} FAILED: {values}")
        return bool(ok)


def _trace_csv(ctx: RunContext, trace: FlowTrace) -> None:
    ctx.store.put_csv("trace.csv", TraceRecord.CSV_COLUMNS, trace.csv_rows())


CHECKPOINT_COLUMNS = ("index", "rho", "path")


def _checkpoint_fields(ctx: RunContext, trace: FlowTrace) -> None:
    """u at every checkpoint in the binary field layout, indexed by checkpoints.csv."""
    rows = []
    for k, state in enumerate(trace.checkpoints):
        name = f"checkpoint_{k:03d}_u.bin"
        ctx.store.put_field(name, state.u)
        rows.append((k, state.rho, name))
    ctx.store.put_csv("checkpoints.csv", CHECKPOINT_COLUMNS, rows)


def _lambdas_for(trace: FlowTrace, config: RunConfig) -> List[float]:
    if config.lambdas:
        return list(config.lambdas)
    rhos = trace.checkpoint_rhos
    lo, hi = max(10.0, rhos[1] * 1.1), min(100.0, rhos[-2] / 1.1)
    if hi <= lo:
        return []
    return [float(x) for x in np.geomspace(lo, hi, 6)]


def run_flow(ctx: RunContext) -> None:
    config = ctx.config
    metric = build_metric(config.gram)
    grid = make_grid(metric, config.resolution)
    controls = config.solver.to_controls()
    if config.H_data is not None:
        H = build_field(config.H_data, grid, config.seed)
        u0 = initial_data_from_mean_curvature(H, config.n)
    else:
        u0 = build_field(config.initial_data, grid, config.seed)
    state = init_state(u0, config.rho0, config.n, config.epsilon)

    with ctx.stage("flow"):
        final, trace = evolve_to(state, config.rho_target, controls, converge_psi=config.converge_psi)
    _trace_csv(ctx, trace)
    _checkpoint_fields(ctx, trace)

    slacks = [r.barrier_slack() for r in trace.records]
    ctx.check("barriers", min(slacks) >= 0.0, min_slack=min(slacks))
    F = trace.column("F")
    ctx.check("monotone_F", bool(np.all(np.diff(F) <= 1e-12 * (1.0 + np.abs(F[:-1])))), F_initial=float(F[0]), F_final=float(F[-1]))

    identity = dissipation_identity_errors(trace)
    scale = float(np.max(np.abs(trace.column("dissipation"))))
    resolved = [r for r in identity if abs(r["dissipation"]) > 1e-8 * scale]
    worst = max((r["abs_error"] / abs(r["dissipation"]) for r in resolved), default=0.0)
    ctx.check("dissipation_identity", worst <= 1e-3, worst_relative_error=worst)

    with ctx.stage("curvature"):
        mid = min(trace.checkpoints, key=lambda c: abs(math.log(c.rho / 10.0)))
        deviation = certify_flow_curvature(mid, min(1e-3, 0.5 * controls.dt_max), controls)
    ctx.check("scalar_curvature", deviation <= 1e-3, rho=mid.rho, max_deviation=deviation)

    if not trace.converged:
        if config.converge_psi:
            ctx.check("psi_converged", False, last_delta=trace.checkpoint_psi_deltas[-1])
        else:
            logger.info("[RUN] converge_psi disabled and psi not settled; skipping mass extraction")
        return

    with ctx.stage("mass"):
        report = extract_mass_aspect(trace)
        inequality = check_main_inequality(trace, report)
    ctx.store.put_field("mu.bin", report.mu)
    ctx.store.put_field("f.bin", report.f)
    mass_json = report.to_dict()
    ctx.check("main_inequality", inequality.passed, **inequality.to_dict())

    lambdas = _lambdas_for(trace, config)
    if lambdas and report.f.max_abs() > 0.0:
        with ctx.stage("almost_cmc"):
            rows, exponent = almost_cmc_sweep(trace, report, lambdas)
        mass_json["almost_cmc"] = {"rows": rows, "exponent": exponent}
    ctx.store.put_json("mass_report.json", mass_json)


def run_band(ctx: RunContext) -> None:
    config = ctx.config
    gamma = build_metric(config.gram)
    gamma_hat = build_metric(config.gram_hat)
    grid = make_grid(gamma_hat, config.resolution)
    if config.h_data is not None:
        h = build_field(config.h_data, grid, config.seed)
    else:
        H_hat = build_field(config.H_data, grid, config.seed)
        h = H_hat.with_values(0.5 * H_hat.values)

    state = init_band(gamma_hat, gamma, h)
    with ctx.stage("band"):
        final, states = band_evolve(state, config.band_dt)
    with ctx.stage("verify"):
        report = verify_band(states, h)
    ctx.store.put_csv("band_trace.csv", BAND_TRACE_COLUMNS, report.csv_rows())
    for item, ok in report.items.items():
        ctx.check(f"band_{item}", ok)

    if np.ptp(state.v.values) == 0.0:
        reference = band_ode_reference(float(state.v.values.flat[0]), gamma_hat, gamma, 1.0)
        error = float(np.max(np.abs(final.v.values - reference)))
        ctx.check("band_ode_reference", error <= 1e-8, reference=reference, max_error=error)


def run_hm_sweep(ctx: RunContext) -> None:
    config = ctx.config
    model = HMModel(n=config.n, r0=config.r0, torus_circumferences=tuple(config.torus_circumferences or ()))
    with ctx.stage("certify"):
        fd = certify_hm_curvature(model, r_range=(2.0 * config.r0, 4.0 * config.r0))
    target = -config.n * (config.n - 1)
    ctx.check("hm_scalar_curvature", abs(fd.value - target) <= max(3.0 * fd.error_estimate, 1e-8), **fd.to_dict())

    with ctx.stage("sweep"):
        rows = hm_sweep(model, config.radii)
    ctx.store.put_csv("hm_sweep.csv", HM_SWEEP_COLUMNS, [r.csv_row() for r in rows])
    ratios = [r.ratio for r in rows]
    ctx.check("ratio_at_most_one", all(x <= 1.0 + 1e-9 for x in ratios), ratios=ratios)
    ctx.check("ratio_increasing", all(b > a for a, b in zip(ratios, ratios[1:])))


def run_bound_check(ctx: RunContext) -> None:
    config = ctx.config
    metric = build_metric(config.gram)
    grid = make_grid(metric, config.resolution)
    H = build_field(config.H_data, grid, config.seed)
    verdict = bound_check(metric, config.n, H)
    ctx.checks["bound"] = {"passed": True, **verdict.to_dict()}


def validation_suite(n: int = 3) -> Dict[str, Dict[str, Any]]:
    """Curvature-oracle suite: hyperbolic, flat product, closed form vs fd, Horowitz-Myers."""
    results: Dict[str, Dict[str, Any]] = {}
    target = -n * (n - 1)
    metric = make_flat_metric(np.eye(n - 1))
    rhos = np.linspace(2.0, 3.0, 33)

    hyperbolic = warped_sample_from_function(metric, 8, rhos, lambda *args: np.ones_like(args[0]))
    fd = fd_scalar_curvature(hyperbolic, (0,) * (n - 1) + (16,))
    results["hyperbolic"] = {"passed": abs(fd.value - target) <= max(3.0 * fd.error_estimate, 1e-8), **fd.to_dict()}

    flat = product_sample(metric, 8, np.linspace(0.0, 1.0, 17))
    fd = fd_scalar_curvature(flat, (0,) * (n - 1) + (8,))
    results["flat_product"] = {"passed": abs(fd.value) <= 1e-10, **fd.to_dict()}

    frozen = warped_sample_from_function(metric, 8, rhos, lambda *args: 2.0 * np.ones_like(args[0]))
    fd = fd_scalar_curvature(frozen, (0,) * (n - 1) + (16,))
    expected = -n * (n - 1) / 4.0
    results["frozen_warped"] = {"passed": abs(fd.value - expected) <= max(3.0 * fd.error_estimate, 1e-8), "expected": expected, **fd.to_dict()}

    fd = certify_hm_curvature(HMModel(n=n))
    results["horowitz_myers"] = {"passed": abs(fd.value - target) <= max(3.0 * fd.error_estimate, 1e-8), **fd.to_dict()}
    return results


def run_validate(ctx: RunContext) -> None:
    with ctx.stage("oracle_suite"):
        results = validation_suite(ctx.config.n)
    for name, result in results.items():
        ctx.check(f"oracle_{name}", result.pop("passed"), **result)


EXPERIMENTS: Dict[Experiment, Callable[[RunContext], None]] = {
    Experiment.FLOW: run_flow,
    Experiment.BAND: run_band,
    Experiment.HM_SWEEP: run_hm_sweep,
    Experiment.BOUND_CHECK: run_bound_check,
    Experiment.VALIDATE: run_validate,
}


# =============================================================================
# Run
# =============================================================================

def run(config: RunConfig, output: Optional[str] = None) -> int:
    """
    Execute one experiment and write its manifest.

    Returns the process exit code (0 pass, 2 failed check or runtime error).
    """
    out_dir = resolve_output_dir(config, output)
    store = RunArtifactStore(str(out_dir))
    ctx = RunContext(config, store)
    config_echo = config.model_dump(mode="json")
    provenance = RunProvenance.now(config_echo, config.experiment.value, seed=config.seed)
    failures: List[Dict[str, Any]] = []
    exit_code = EXIT_OK

    logger.info(f"[RUN] Experiment {config.experiment.value} -> {out_dir}")
    unexpected: Optional[Exception] = None
    try:
        EXPERIMENTS[config.experiment](ctx)
    except TorusFillError as e:
        logger.error(f"[RUN] {e.code}: {e.message}")
        failures.append(e.to_dict())
        exit_code = e.exit_code
    except Exception as e:
        logger.exception(f"[RUN] Unexpected {type(e).__name__} in {config.experiment.value}")
        failures.append({"code": "internal_error", "message": str(e), "details": {"type": type(e).__name__}})
        exit_code = EXIT_FAILED
        unexpected = e

    for name, check in ctx.checks.items():
        if not check["passed"]:
            failures.append(InvariantViolation(f"Check {name} failed", details={"check": name}).to_dict())

    verdict = {"experiment": config.experiment.value, "passed": not failures, "checks": ctx.checks}
    store.put_json("verdict.json", verdict)

    if failures and exit_code == EXIT_OK:
        exit_code = EXIT_FAILED
    manifest = {
        "config": config_echo,
        "provenance": provenance.to_dict(),
        "stages": [s.to_dict() for s in ctx.stages],
        "artifacts": [a.to_dict() for a in store.artifacts],
        "checks": {name: check["passed"] for name, check in ctx.checks.items()},
        "failures": failures,
        "exit_code": exit_code,
    }
    store.put_json("manifest.json", manifest)
    logger.info(f"[RUN] Finished with exit code {exit_code} ({len(failures)} failure(s))")
    if unexpected is not None:
        raise unexpected
    return exit_code


def run_bound_check_cli(gram: Sequence[Sequence[float]], n: int, H: Union[float, str], output: Optional[str] = None) -> Tuple[int, BoundVerdict]:
    """bound-check sub-command: H is a number or a path to a binary field."""
    metric = build_metric(gram)
    if isinstance(H, str) and not _is_number(H):
        H_data: Union[float, ScalarField] = read_field(H, metric)
    else:
        H_data = float(H)
    verdict = bound_check(metric, n, H_data)
    if output:
        store = RunArtifactStore(output)
        store.put_json("verdict.json", verdict.to_dict())
    return EXIT_OK, verdict


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False
