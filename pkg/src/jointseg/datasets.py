"""Materialize phantom datasets to disk and load them back for training.

On disk a dataset is: NIfTI volumes per subject, a JSON-lines manifest
with split and provenance per record, and an evaluation sidecar that maps
lesioned subjects to their hidden full ground truth. Training code reads
the manifest only; the sidecar is for evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nifti
from .errors import ConfigError, InputError
from .manifest import SampleRecord, read_manifest, select, write_manifest
from .phantom import PhantomConfig, generate_anatomy_phantom, generate_lesion_phantom
from .seeds import substream_seed
from .volume import LabelMap, LesionMask, Volume, zscore_normalize

SIDECAR_NAME = "eval_sidecar.json"
MANIFEST_NAME = "manifest.jsonl"


def _splits(n: int, n_val: int, n_test: int) -> list[str]:
    if n_val + n_test >= n:
        raise ConfigError(f"cannot split {n} subjects into val={n_val}, test={n_test}")
    return ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test


def synthesize_dataset(
    out_dir,
    n_anatomy: int,
    n_lesion: int,
    cfg: PhantomConfig,
    seed: int,
    anatomy_val: int = 2,
    anatomy_test: int = 6,
    lesion_test: int = 6,
) -> str:
    """Generate and save both disparately labeled datasets.

    Lesion-free records expose T1 + anatomy labels; lesioned records
    expose T1 + FLAIR + lesion mask. Volumes are z-score normalized.
    Returns the manifest path.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "anatomy"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lesion"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "eval"), exist_ok=True)

    records: list[SampleRecord] = []
    sidecar: dict[str, str] = {}

    splits = _splits(n_anatomy, anatomy_val, anatomy_test)
    for i in range(n_anatomy):
        sid = f"ana{i:03d}"
        t1, y_a = generate_anatomy_phantom(cfg, substream_seed(seed, "anatomy", i))
        t1 = zscore_normalize(t1)
        t1_rel = f"anatomy/{sid}_t1.nii.gz"
        seg_rel = f"anatomy/{sid}_seg.nii.gz"
        nifti.save_volume(os.path.join(out_dir, t1_rel), t1)
        nifti.save_labelmap(os.path.join(out_dir, seg_rel), y_a)
        records.append(
            SampleRecord(
                subject_id=sid,
                provenance="lesion-free",
                split=splits[i],
                t1_path=t1_rel,
                anatomy_path=seg_rel,
            )
        )

    splits = _splits(n_lesion, 0, lesion_test)
    for i in range(n_lesion):
        sid = f"les{i:03d}"
        t1, flair, y_l, full_gt = generate_lesion_phantom(
            cfg, substream_seed(seed, "lesion", i)
        )
        t1 = zscore_normalize(t1)
        flair = zscore_normalize(flair)
        t1_rel = f"lesion/{sid}_t1.nii.gz"
        fl_rel = f"lesion/{sid}_flair.nii.gz"
        seg_rel = f"lesion/{sid}_lesionseg.nii.gz"
        gt_rel = f"eval/{sid}_fullgt.nii.gz"
        nifti.save_volume(os.path.join(out_dir, t1_rel), t1)
        nifti.save_volume(os.path.join(out_dir, fl_rel), flair)
        nifti.save_mask(os.path.join(out_dir, seg_rel), y_l)
        nifti.save_labelmap(os.path.join(out_dir, gt_rel), full_gt)
        sidecar[sid] = gt_rel
        records.append(
            SampleRecord(
                subject_id=sid,
                provenance="lesioned",
                split=splits[i],
                t1_path=t1_rel,
                flair_path=fl_rel,
                lesion_path=seg_rel,
            )
        )

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    write_manifest(manifest_path, records)
    with open(os.path.join(out_dir, SIDECAR_NAME), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return manifest_path


@dataclass
class Subject:
    """In-memory view of one manifest record."""

    subject_id: str
    provenance: str
    split: str
    t1: np.ndarray | None = None
    flair: np.ndarray | None = None
    anatomy: np.ndarray | None = None
    lesion: np.ndarray | None = None
    full_gt: np.ndarray | None = None
    spacing: tuple = (1.0, 1.0, 1.0)


def load_subjects(
    data_dir, provenance=None, split=None, with_full_gt: bool = False
) -> list[Subject]:
    """Load manifest records into memory.

    ``with_full_gt`` additionally resolves the evaluation sidecar; it must
    never be set on a training path.
    """
    data_dir = os.fspath(data_dir)
    records = select(read_manifest(os.path.join(data_dir, MANIFEST_NAME)), provenance, split)
    sidecar = {}
    if with_full_gt:
        with open(os.path.join(data_dir, SIDECAR_NAME)) as fh:
            sidecar = json.load(fh)
    out = []
    for rec in records:
        sub = Subject(subject_id=rec.subject_id, provenance=rec.provenance, split=rec.split)
        vol, _ = nifti.load_volume(os.path.join(data_dir, rec.t1_path))
        sub.t1 = vol.data.astype(np.float32)
        sub.spacing = vol.spacing
        if rec.flair_path:
            sub.flair = nifti.load_volume(os.path.join(data_dir, rec.flair_path))[0].data.astype(np.float32)
        if rec.anatomy_path:
            sub.anatomy = nifti.load_labelmap(os.path.join(data_dir, rec.anatomy_path)).data
        if rec.lesion_path:
            sub.lesion = nifti.load_mask(os.path.join(data_dir, rec.lesion_path)).data
        if with_full_gt:
            if rec.subject_id not in sidecar:
                raise InputError(f"no full ground truth for subject {rec.subject_id}")
            sub.full_gt = nifti.load_labelmap(
                os.path.join(data_dir, sidecar[rec.subject_id])
            ).data
        out.append(sub)
    return out


def as_volume(sub: Subject, kind: str) -> Volume:
    arr = getattr(sub, kind)
    return Volume(data=arr, spacing=sub.spacing)


def as_labelmap(sub: Subject, kind: str) -> LabelMap:
    return LabelMap(data=getattr(sub, kind))


def as_mask(sub: Subject) -> LesionMask:
    return LesionMask(data=sub.lesion)
