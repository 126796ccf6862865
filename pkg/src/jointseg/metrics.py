"""Evaluation metrics: Dice score, HD95 and majority voting."""

from __future__ import annotations

import csv
import os

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InputError, UndefinedMetric
from .labels import CLASS_NAMES, LESION
from .volume import LabelMap, LesionMask


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Hard Dice for one class; 1.0 when the class is absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError("prediction and ground truth shapes differ")
    p = pred == class_id
    g = gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels of a binary mask (6-connectivity, array edge counts
    as background)."""
    mask = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def hd95(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled directed surface distances, in mm.

    Distances from every surface voxel of one mask to the nearest surface
    voxel of the other are pooled over both directions; the percentile is
    taken with linear interpolation on the sorted pooled list. Raises
    UndefinedMetric on an empty mask: the value is reported as missing,
    never as 0.
    """
    p = pred_mask.data if isinstance(pred_mask, LesionMask) else np.asarray(pred_mask)
    g = gt_mask.data if isinstance(gt_mask, LesionMask) else np.asarray(gt_mask)
    if p.shape != g.shape:
        raise InputError("mask shapes differ")
    if p.sum() == 0 or g.sum() == 0:
        raise UndefinedMetric("hd95 undefined for an empty mask")
    scale = np.asarray(spacing, dtype=np.float64)
    ps = np.argwhere(surface_voxels(p)) * scale
    gs = np.argwhere(surface_voxels(g)) * scale
    d_pg = cKDTree(gs).query(ps)[0]
    d_gp = cKDTree(ps).query(gs)[0]
    pooled = np.concatenate([d_pg, d_gp])
    return float(np.percentile(pooled, 95))


def majority_vote(predictions: list[LabelMap]) -> LabelMap:
    """Per-voxel most frequent label; ties resolve to the lowest class id."""
    if not predictions:
        raise InputError("majority_vote needs at least one prediction")
    class_count = predictions[0].class_count
    shape = predictions[0].shape
    for p in predictions:
        if p.shape != shape or p.class_count != class_count:
            raise InputError("predictions disagree in shape or class count")
    counts = np.zeros((class_count,) + shape, dtype=np.int32)
    for p in predictions:
        for c in range(class_count):
            counts[c] += p.data == c
    winner = counts.argmax(axis=0).astype(np.uint8)
    return LabelMap(data=winner, class_count=class_count)


def region_dice(
    pred: np.ndarray, gt: np.ndarray, region: np.ndarray, class_ids=None
) -> float:
    """Mean per-class Dice restricted to a region.

    Only classes present in the ground truth inside the region contribute;
    returns NaN when the region holds no labelled voxels.
    """
    region = np.asarray(region).astype(bool)
    pred, gt = np.asarray(pred), np.asarray(gt)
    if not (pred.shape == gt.shape == region.shape):
        raise InputError("shape mismatch")
    gt_in = gt[region]
    pred_in = pred[region]
    present = np.unique(gt_in)
    if class_ids is not None:
        present = [c for c in present if c in class_ids]
    scores = []
    for c in present:
        p = pred_in == c
        g = gt_in == c
        scores.append(2.0 * int((p & g).sum()) / (int(p.sum()) + int(g.sum())))
    return float(np.mean(scores)) if scores else float("nan")


def paste_lesion(anatomy_ids: np.ndarray, lesion_mask: np.ndarray) -> np.ndarray:
    """Overlay the lesion class on an anatomy map wherever the mask is set."""
    return np.where(np.asarray(lesion_mask).astype(bool), np.uint8(LESION), anatomy_ids)


METRIC_COLUMNS = ("subject_id", "class_name", "dice", "hd95", "stage")


def write_metrics_csv(path, rows, append: bool = False) -> None:
    """Emit metric rows; a missing HD95 is written as an empty field."""
    exists = os.path.exists(path)
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if not (append and exists):
            writer.writeheader()
        for row in rows:
            out = dict(row)
            if out.get("hd95") is None:
                out["hd95"] = ""
            writer.writerow(out)


def metric_rows(subject_id, pred, gt, stage, spacing=(1, 1, 1), class_ids=None):
    """Per-class Dice and HD95 rows for one subject."""
    ids = class_ids if class_ids is not None else sorted(CLASS_NAMES)
    rows = []
    for c in ids:
        d = dice_score(pred, gt, c)
        try:
            h = hd95(pred == c, gt == c, spacing)
        except UndefinedMetric:
            h = None
        rows.append(
            {
                "subject_id": subject_id,
                "class_name": CLASS_NAMES[c],
                "dice": f"{d:.6f}",
                "hd95": None if h is None else f"{h:.6f}",
                "stage": stage,
            }
        )
    return rows
