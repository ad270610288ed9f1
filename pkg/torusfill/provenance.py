"""
Provenance: Reproducibility Records for Runs

Every run manifest carries:
- A canonical hash of the validated config
- The seed and the versions of the numerical stack
- Hashes of every artifact written (see files.artifact_store)

Two runs with equal config hashes and seeds must produce byte-identical
CSV outputs; the manifest makes that checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from typing import Any, Dict, Optional
import hashlib
import json
import platform


def sha256_bytes(b: bytes) -> str:
    """Compute SHA-256 hash of raw bytes."""
    return hashlib.sha256(b).hexdigest()


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def sha256_json(obj: Any) -> str:
    """Compute SHA-256 hash of canonical JSON representation."""
    return sha256_bytes(canonical_json(obj))


def _package_version(name: str) -> Optional[str]:
    try:
        return metadata.version(name)
    except metadata.PackageNotFoundError:
        return None


TRACKED_PACKAGES = ("numpy", "scipy", "pydantic", "python-dotenv", "python-json-logger")


@dataclass(frozen=True)
class RunProvenance:
    """
    Where a run's numbers came from.

    Attributes:
        started_at: ISO 8601 timestamp
        config_hash: SHA-256 of the canonical config JSON
        experiment: experiment name
        seed: random seed (None when the experiment draws nothing)
        versions: package -> version for the numerical stack
        python: interpreter version
        meta: free-form extras
    """
    started_at: str
    config_hash: str
    experiment: str
    seed: Optional[int] = None
    versions: Dict[str, Optional[str]] = field(default_factory=dict)
    python: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def now(config: Dict[str, Any], experiment: str, seed: Optional[int] = None, **meta) -> "RunProvenance":
        """
        Create a RunProvenance with the current timestamp.

        Args:
            config: JSON-compatible config echo (hashed canonically)
            experiment: experiment name
            seed: random seed
            **meta: extra fields stored under ``meta``
        """
        return RunProvenance(
            started_at=datetime.now(timezone.utc).isoformat(),
            config_hash=sha256_json(config),
            experiment=experiment,
            seed=seed,
            versions={name: _package_version(name) for name in TRACKED_PACKAGES},
            python=platform.python_version(),
            meta=dict(meta),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "started_at": self.started_at,
            "config_hash": self.config_hash,
            "experiment": self.experiment,
            "seed": self.seed,
            "versions": self.versions,
            "python": self.python,
            "meta": self.meta,
        }
