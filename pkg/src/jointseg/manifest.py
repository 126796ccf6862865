"""Dataset manifests (JSON lines, one record per subject) and run manifests.

The dataset manifest is the disparate-label contract made explicit:
lesion-free records carry anatomy labels only, lesioned records carry
lesion masks only. Full ground truth for lesioned phantoms lives in a
separate evaluation sidecar that training code never reads.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

from .errors import ConfigError, InputError

PROVENANCES = ("lesion-free", "lesioned", "pseudo-lesioned")
SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    """One subject: sequence paths, available labels and provenance."""

    subject_id: str
    provenance: str
    split: str
    t1_path: str
    flair_path: str | None = None
    anatomy_path: str | None = None
    lesion_path: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if self.provenance == "lesion-free" and self.lesion_path is not None:
            raise InputError("lesion-free records must not carry lesion labels")
        if self.provenance == "lesioned" and self.anatomy_path is not None:
            raise InputError("lesioned records must not carry anatomy labels")


def write_manifest(path, records: list[SampleRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_manifest(path) -> list[SampleRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(SampleRecord(**json.loads(line)))
    return records


def select(records, provenance=None, split=None) -> list[SampleRecord]:
    out = records
    if provenance is not None:
        out = [r for r in out if r.provenance == provenance]
    if split is not None:
        out = [r for r in out if r.split == split]
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable configuration."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()
    ).hexdigest()


@dataclass
class RunManifest:
    """Immutable provenance record for one pipeline run."""

    stage: str
    seed: int
    config_hash: str
    dataset_manifest_hash: str
    checkpoint_lineage: list[str] = field(default_factory=list)
    metric_files: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    created_unix: float = 0.0
    extra: dict = field(default_factory=dict)

    def short_hash(self) -> str:
        return config_hash(asdict(self))[:12]


def write_run_manifest(path, manifest: RunManifest) -> str:
    """Write a run manifest exactly once; existing files are never rewritten."""
    if os.path.exists(path):
        raise ConfigError(f"run manifest {path} already exists (manifests are immutable)")
    manifest.created_unix = manifest.created_unix or time.time()
    with open(path, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return os.fspath(path)


def read_run_manifest(path) -> RunManifest:
    with open(path) as fh:
        return RunManifest(**json.load(fh))
