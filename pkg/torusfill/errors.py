"""
Errors raised by the torusfill numerical modules.

Every error carries a short machine-readable ``code`` (used in the run
manifest's failure list) and the process ``exit_code`` the CLI maps it to:

    3  configuration problems (bad config file, bad CLI arguments)
    2  anything raised while an experiment is running (contract violations,
       solver failures, failed invariant checks)
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class TorusFillError(Exception):
    """Base class for all torusfill errors."""

    code = "torusfill_error"
    exit_code = 2

    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "code": self.code,
            "message": self.message,
            "details": self.details,
        }


# =============================================================================
# lattice_torus
# =============================================================================

class NotSymmetric(TorusFillError, ValueError):
    code = "not_symmetric"


class NotPositiveDefinite(TorusFillError, ValueError):
    code = "not_positive_definite"


class BadDimension(TorusFillError, ValueError):
    code = "bad_dimension"


class BoundTooLarge(TorusFillError, ValueError):
    code = "bound_too_large"


class ResolutionTooSmall(TorusFillError, ValueError):
    code = "resolution_too_small"


# =============================================================================
# spectral_field / mass_analysis
# =============================================================================

class NonZeroMean(TorusFillError, ValueError):
    code = "non_zero_mean"


class NotZeroMean(TorusFillError, ValueError):
    code = "not_zero_mean"


class NotConverged(TorusFillError):
    code = "not_converged"


class SurfaceOutOfRange(TorusFillError, ValueError):
    code = "surface_out_of_range"


# =============================================================================
# flow_solver / interpolation_band
# =============================================================================

class NonPositiveInitialData(TorusFillError, ValueError):
    code = "non_positive_initial_data"


class StabilityViolation(TorusFillError):
    code = "stability_violation"


class NonFinite(TorusFillError):
    code = "non_finite"


class MaxStepsExceeded(TorusFillError):
    code = "max_steps_exceeded"


class UpperBarrierBlowup(TorusFillError, ValueError):
    code = "upper_barrier_blowup"


class DomainError(TorusFillError, ValueError):
    code = "domain_error"


class NotDominated(TorusFillError, ValueError):
    code = "not_dominated"


class NonPositiveH(TorusFillError, ValueError):
    code = "non_positive_h"


# =============================================================================
# curvature_oracle
# =============================================================================

class SingularMetric(TorusFillError, ValueError):
    code = "singular_metric"


class StencilOutOfRange(TorusFillError, ValueError):
    code = "stencil_out_of_range"


# =============================================================================
# cli_runner
# =============================================================================

class ConfigError(TorusFillError, ValueError):
    code = "config_error"
    exit_code = 3


class InvariantViolation(TorusFillError):
    """An embedded check failed although the computation itself completed."""

    code = "invariant_violation"
