"""
Files Module: Run Outputs on Disk

Components:
- RunArtifactStore: atomic writes (temp + rename) with SHA-256 records
- StoredArtifact: one written output, listed in manifest.json
- field_io: CSV and binary layouts for grid fields
"""

from .artifact_store import RunArtifactStore, StoredArtifact, format_number
from .field_io import (
    field_from_bytes,
    field_from_csv,
    field_to_bytes,
    field_to_csv,
    read_field,
)

__all__ = [
    "RunArtifactStore",
    "StoredArtifact",
    "format_number",
    "field_from_bytes",
    "field_from_csv",
    "field_to_bytes",
    "field_to_csv",
    "read_field",
]
