"""
Stage timing for experiment runs.

StageTimer wraps one stage of a run (flow solve, mass extraction, oracle
check, ...) and appends a StageRecord to a shared list that ends up in
manifest.json["stages"]. Durations are the only nondeterministic content
of a manifest.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class StageRecord:
    stage: str
    success: bool
    duration_ms: float
    data: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "stage": self.stage,
            "success": self.success,
            "duration_ms": round(self.duration_ms, 3),
            "data": self.data,
        }


class StageTimer:
    """Context manager for timing a stage and recording the outcome."""

    def __init__(self, stage: str, records: Optional[List[StageRecord]] = None, data: Optional[Dict[str, Any]] = None):
        self.stage = stage
        self.records = records if records is not None else []
        self.data = data or {}
        self.start_time: Optional[float] = None
        self.success = True

    def __enter__(self) -> "StageTimer":
        self.start_time = time.perf_counter()
        logger.debug(f"[RUN] Stage {self.stage} started")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        duration_ms = (time.perf_counter() - self.start_time) * 1000.0
        if exc_type:
            self.success = False
            self.data["errorMessage"] = str(exc_val)
        self.records.append(StageRecord(self.stage, self.success, duration_ms, self.data))
        level = logging.INFO if self.success else logging.ERROR
        logger.log(level, f"[RUN] Stage {self.stage} {'done' if self.success else 'failed'} in {duration_ms:.1f} ms")
        return False  # Don't suppress exceptions
