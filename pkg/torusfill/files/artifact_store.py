"""
Artifact Store: Atomic Output Files for Runs

Every output of a run (CSV tables, JSON reports, binary fields) is written
through RunArtifactStore:
- written to a temp file in the target directory, then os.replace'd
- hashed (SHA-256) and sized
- recorded as a StoredArtifact for manifest.json

Directory structure:
    output_dir/
        trace.csv, mass_report.json, mu.bin, ...
        manifest.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from ..provenance import sha256_bytes
from ..spectral_field import ScalarField
from .field_io import field_to_bytes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoredArtifact:
    """
    One written output file.

    Attributes:
        path: path relative to the run directory
        sha256: hash of the bytes written
        size_bytes: size of the file
        kind: "csv", "json" or "field"
    """
    path: str
    sha256: str
    size_bytes: int
    kind: str

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "path": self.path,
            "sha256": self.sha256,
            "size_bytes": self.size_bytes,
            "kind": self.kind,
        }


def format_number(x: Any) -> str:
    """Shortest round-trip text for floats; ints and strings pass through."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


class RunArtifactStore:
    """Filesystem store for one run directory."""

    def __init__(self, root_dir: str):
        """
        Initialize the store.

        Args:
            root_dir: run output directory (created if missing)
        """
        self.root = Path(root_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._artifacts: List[StoredArtifact] = []
        logger.info(f"[STORE] Writing run outputs to {self.root}")

    @property
    def artifacts(self) -> List[StoredArtifact]:
        return list(self._artifacts)

    def put_bytes(self, name: str, data: bytes, kind: str) -> StoredArtifact:
        """Atomically write ``data`` to ``root/name`` and record it."""
        target = self.root / name
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=str(self.root))
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

        stored = StoredArtifact(path=name, sha256=sha256_bytes(data), size_bytes=len(data), kind=kind)
        self._artifacts = [a for a in self._artifacts if a.path != name] + [stored]
        logger.debug(f"[STORE] Wrote {name} ({len(data)} bytes, sha256={stored.sha256[:12]})")
        return stored

    def put_json(self, name: str, obj: Any) -> StoredArtifact:
        data = (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode("utf-8")
        return self.put_bytes(name, data, kind="json")

    def put_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> StoredArtifact:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(x) for x in row])
        return self.put_bytes(name, buffer.getvalue().encode("utf-8"), kind="csv")

    def put_field(self, name: str, field: ScalarField) -> StoredArtifact:
        return self.put_bytes(name, field_to_bytes(field), kind="field")

    def path(self, name: str) -> Path:
        return self.root / name
