"""
Pydantic schemas for run configs.
A run config is one JSON object; unknown keys are errors.
"""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class Experiment(str, Enum):
    FLOW = "flow"
    BAND = "band"
    HM_SWEEP = "hm_sweep"
    BOUND_CHECK = "bound_check"
    VALIDATE = "validate"


class Scheme(str, Enum):
    IMEX2 = "imex2"
    RK4 = "rk4"


class FieldKind(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    RANDOM = "random"
    FILE = "file"


class InitialDataSpec(BaseModel):
    """
    A scalar field on the torus grid.

    constant: value
    cosine:   value + amplitude cos(2 pi mode . x)
    random:   value (1 + amplitude s(x)), s a seeded low-mode sum with max|s| = 1
    file:     binary field file at ``path``
    """
    model_config = ConfigDict(extra="forbid")

    kind: FieldKind = FieldKind.CONSTANT
    value: float = 1.0
    amplitude: float = 0.0
    mode: Optional[List[int]] = None
    max_mode: int = Field(default=2, ge=1)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "InitialDataSpec":
        if self.kind == FieldKind.FILE and not self.path:
            raise ValueError("file initial data needs 'path'")
        if self.kind == FieldKind.RANDOM and not 0.0 <= self.amplitude < 1.0:
            raise ValueError("random initial data needs 0 <= amplitude < 1")
        return self


class SolverControlsConfig(BaseModel):
    """Time-stepping controls as configured; to_controls() builds flow_solver.SolverControls."""
    model_config = ConfigDict(extra="forbid")

    scheme: Scheme = Scheme.IMEX2
    dt0: Optional[float] = Field(default=None, gt=0.0)
    safety_factor: float = Field(default=0.002, gt=0.0, le=1.0)
    dt_max: float = Field(default=0.05, gt=0.0)
    checkpoint_ratio: float = Field(default=1.25, gt=1.0)
    max_steps: int = Field(default=500_000, ge=1)
    psi_tol: float = Field(default=1e-8, gt=0.0)
    max_rho: float = Field(default=1e7, gt=1.0)
    dealias: bool = False

    def to_controls(self):
        from .flow_solver import SolverControls

        return SolverControls(
            scheme=self.scheme.value,
            dt0=self.dt0,
            safety_factor=self.safety_factor,
            dt_max=self.dt_max,
            checkpoint_ratio=self.checkpoint_ratio,
            max_steps=self.max_steps,
            psi_tol=self.psi_tol,
            max_rho=self.max_rho,
            dealias=self.dealias,
        )


class RunConfig(BaseModel):
    """One experiment invocation."""
    model_config = ConfigDict(extra="forbid")

    experiment: Experiment
    n: int = Field(default=3, ge=3)
    gram: Optional[List[List[float]]] = None
    gram_hat: Optional[List[List[float]]] = None
    resolution: Union[int, List[int]] = 32
    rho0: float = Field(default=1.0, gt=0.0)
    rho_target: float = Field(default=100.0, gt=0.0)
    converge_psi: bool = True
    epsilon: float = Field(default=0.0, ge=0.0, lt=1.0)
    initial_data: InitialDataSpec = Field(default_factory=InitialDataSpec)
    H_data: Optional[InitialDataSpec] = None
    h_data: Optional[InitialDataSpec] = None
    band_dt: float = Field(default=1.0 / 256.0, gt=0.0, le=0.5)
    r0: float = Field(default=1.0, gt=0.0)
    radii: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0, 40.0, 80.0])
    torus_circumferences: Optional[List[float]] = None
    lambdas: Optional[List[float]] = None
    solver: SolverControlsConfig = Field(default_factory=SolverControlsConfig)
    output_dir: Optional[str] = None
    seed: int = Field(default=0, ge=0)

    @field_validator("resolution")
    @classmethod
    def _check_resolution(cls, value):
        values = [value] if isinstance(value, int) else list(value)
        if not values or min(values) < 4:
            raise ValueError("resolution needs at least 4 points per axis")
        return value

    @model_validator(mode="after")
    def _check_experiment(self) -> "RunConfig":
        exp = self.experiment
        if exp in (Experiment.FLOW, Experiment.BAND, Experiment.BOUND_CHECK) and self.gram is None:
            raise ValueError(f"experiment '{exp.value}' requires 'gram'")
        if self.gram is not None and len(self.gram) != self.n - 1:
            raise ValueError(f"gram must be {self.n - 1}x{self.n - 1} for n={self.n}")
        if exp == Experiment.FLOW and self.rho_target <= self.rho0:
            raise ValueError("rho_target must exceed rho0")
        if exp == Experiment.BAND:
            if self.gram_hat is None:
                raise ValueError("experiment 'band' requires 'gram_hat'")
            if self.h_data is None and self.H_data is None:
                raise ValueError("experiment 'band' requires 'h_data' or 'H_data'")
        if exp == Experiment.BOUND_CHECK and self.H_data is None:
            raise ValueError("experiment 'bound_check' requires 'H_data'")
        if any(r <= self.r0 for r in self.radii):
            raise ValueError("radii must exceed r0")
        return self


def parse_run_config(data: dict) -> RunConfig:
    """Validate a config dict; failures become ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(
            f"Invalid run config: {e.error_count()} error(s)",
            details={"errors": [{"loc": list(err["loc"]), "msg": err["msg"]} for err in e.errors()]},
        ) from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must hold a JSON object")
    return parse_run_config(data)
