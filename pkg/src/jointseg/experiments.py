"""Desk-scale studies: lesion-mask degradation, inner-loop ablation,
mask-source comparison, adaptation behaviour and stagewise evaluations.

Every study emits CSV tables under its output directory and returns the
aggregate values it wrote, so callers (CLI, acceptance suite) can assert
on them without re-parsing.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .adapt import (
    AdaptConfig,
    adapt,
    anatomy_ids_from_probs,
    infer_single,
    predict_anatomy_volume,
    predict_lesion_volume,
)
from .datasets import Subject
from .errors import ConfigError, InputError
from .labels import ANATOMY_CLASS_IDS, CLASS_NAMES, LESION
from .losses import compose_fill
from .metrics import dice_score, paste_lesion, region_dice
from .networks import load_checkpoint
from .phantom import PseudoLesionSample, compose_pseudo_lesion
from .seeds import substream_rng
from .training import TrainConfig, meta_cotrain
from .volume import LabelMap, LesionMask, PatchSpec, Volume

REPORT_CLASSES = (1, 2, 3, 4, 5, 6, 7)  # Fig.-style columns: tissues plus lesion
ANATOMY_REPORT_CLASSES = tuple(c for c in REPORT_CLASSES if c != LESION)


@dataclass(frozen=True)
class DegradationSpec:
    """Removal of whole grid-aligned cubic blocks from a lesion mask."""

    fraction: float
    block_edge: int = 10
    seed: int = 0
    tolerance: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("retained fraction must be in (0, 1]")
        if self.block_edge < 1:
            raise ConfigError("block edge must be >= 1")


def degrade_lesion_mask(mask: LesionMask, spec: DegradationSpec) -> LesionMask:
    """Remove grid-aligned blocks until the retained fraction crosses the
    target.

    Output voxels are always a subset of the input. Block granularity can
    make small masks miss the +-tolerance window; that case degrades
    best-effort with a warning.
    """
    data = mask.data.astype(np.uint8)
    total = int(data.sum())
    if total == 0:
        raise InputError("cannot degrade an empty mask")
    if spec.fraction == 1.0:
        return LesionMask(data=data.copy())
    e = spec.block_edge
    blocks = sorted(
        {tuple(v // e) for v in np.argwhere(data)}
    )
    rng = substream_rng(spec.seed, "degradation")
    order = rng.permutation(len(blocks))
    out = data.copy()
    target = spec.fraction * total
    removed = 0
    for idx in order:
        # best effort floor: the degraded mask keeps at least one block
        if out.sum() <= target or removed == len(blocks) - 1:
            break
        bi, bj, bk = blocks[idx]
        out[bi * e : (bi + 1) * e, bj * e : (bj + 1) * e, bk * e : (bk + 1) * e] = 0
        removed += 1
    achieved = out.sum() / total
    if abs(achieved - spec.fraction) > spec.tolerance:
        warnings.warn(
            f"degradation best-effort: retained {achieved:.3f} vs target "
            f"{spec.fraction:.3f} (block granularity)",
            stacklevel=2,
        )
    return LesionMask(data=out)


def build_pseudo_eval_batch(
    anatomy_subjects: list[Subject],
    lesion_subjects: list[Subject],
    n: int,
    seed: int,
) -> list[PseudoLesionSample]:
    """Held-out pseudo-lesioned phantoms: test anatomy images with test
    lesions pasted in; the hidden anatomy is the evaluation target."""
    if not anatomy_subjects or not lesion_subjects:
        raise InputError("need held-out subjects from both datasets")
    rng = substream_rng(seed, "pseudo-eval")
    batch = []
    for _ in range(n):
        a = anatomy_subjects[int(rng.integers(len(anatomy_subjects)))]
        l = lesion_subjects[int(rng.integers(len(lesion_subjects)))]
        sample = compose_pseudo_lesion(
            Volume(data=a.t1), LabelMap(data=a.anatomy), Volume(data=l.t1), LesionMask(data=l.lesion)
        )
        sample.source_anatomy_id = a.subject_id
        sample.source_lesion_id = l.subject_id
        batch.append(sample)
    return batch


def lesion_region_anatomy_dice(model, sample: PseudoLesionSample, spec: PatchSpec, theta=None) -> float:
    """Mean anatomy Dice inside the lesion region against the hidden map."""
    probs = predict_anatomy_volume(model, sample.x_p.data, spec, theta=theta)
    ids = anatomy_ids_from_probs(probs)
    return region_dice(ids, sample.hidden_y_a.data, sample.y_l.data)


def _write_rows(path, header, rows):
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return os.fspath(path)


def evaluate_meta_benefit(
    pretrained_ckpt,
    cotrained_ckpt,
    batch: list[PseudoLesionSample],
    patch_spec: PatchSpec,
    out_csv=None,
) -> dict:
    """Direct (no adaptation) lesion-region anatomy Dice of the pretrained
    vs co-trained extractor on pseudo-lesioned phantoms."""
    pre, _ = load_checkpoint(pretrained_ckpt, expect_stage="pretrained")
    co, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    rows = []
    for i, sample in enumerate(batch):
        d_pre = lesion_region_anatomy_dice(pre, sample, patch_spec)
        d_co = lesion_region_anatomy_dice(co, sample, patch_spec)
        rows.append([f"pseudo{i:02d}", sample.source_anatomy_id, sample.source_lesion_id, d_pre, d_co])
    result = {
        "pretrained_mean": float(np.mean([r[3] for r in rows])),
        "cotrained_mean": float(np.mean([r[4] for r in rows])),
        "per_subject": rows,
    }
    if out_csv:
        _write_rows(
            out_csv,
            ["sample", "anatomy_src", "lesion_src", "dice_pretrained", "dice_cotrained"],
            rows,
        )
    return result


def run_inner_loop_ablation(
    pretrained_ckpt,
    anatomy_train: list[Subject],
    lesion_train: list[Subject],
    batch: list[PseudoLesionSample],
    cfg: TrainConfig,
    adapt_cfg: AdaptConfig,
    sup: tuple[np.ndarray, np.ndarray],
    out_dir,
    meta_ckpt=None,
) -> dict:
    """Meta-trained model vs a control trained on the outer loss only.

    Both runs share seeds and data. The meta model is evaluated with its
    inference-time adaptation (ground-truth pseudo-lesion masks drive the
    adaptation, as in the pseudo setting); the control never adapts, it
    has not been trained for it.
    """
    os.makedirs(out_dir, exist_ok=True)
    if meta_ckpt is None:
        meta_ckpt = meta_cotrain(
            pretrained_ckpt, anatomy_train, lesion_train, cfg, out_dir, name="ablation_meta"
        ).checkpoint
    control = meta_cotrain(
        pretrained_ckpt,
        anatomy_train,
        lesion_train,
        cfg,
        out_dir,
        inner_enabled=False,
        name="ablation_control",
    )
    meta_model, _ = load_checkpoint(meta_ckpt, expect_stage="cotrained")
    ctrl_model, _ = load_checkpoint(control.checkpoint, expect_stage="cotrained")
    spec = adapt_cfg.patch_spec
    fills = substream_rng(cfg.seed, "fills", "ablation")
    rows = []
    for i, sample in enumerate(batch):
        fill = cfg.fill_spec.draw(fills)
        res = adapt(meta_model, sample.x_p.data, sample.y_l.data, sup, fill, adapt_cfg)
        d_meta = lesion_region_anatomy_dice(meta_model, sample, spec, theta=res.theta)
        d_ctrl = lesion_region_anatomy_dice(ctrl_model, sample, spec)
        rows.append([f"pseudo{i:02d}", d_meta, d_ctrl, d_meta - d_ctrl])
    path = _write_rows(
        os.path.join(out_dir, "inner_loop_ablation.csv"),
        ["sample", "dice_meta", "dice_control", "delta"],
        rows,
    )
    wins = sum(1 for r in rows if r[1] >= r[2])
    return {
        "csv": path,
        "wins": wins,
        "n": len(rows),
        "meta_mean": float(np.mean([r[1] for r in rows])),
        "control_mean": float(np.mean([r[2] for r in rows])),
        "meta_checkpoint": os.fspath(meta_ckpt),
        "control_checkpoint": control.checkpoint,
    }


def _hard_consistency_dice(model, theta, x, mask, fill, spec) -> float:
    """Dice between hard predictions for the image and its fill-randomized
    version, restricted to the lesion region where they can diverge."""
    clean = anatomy_ids_from_probs(predict_anatomy_volume(model, x, spec, theta=theta))
    x_tilde = compose_fill(np_as_f32(x), np_as_f32(mask), np.float32(fill))
    rand = anatomy_ids_from_probs(predict_anatomy_volume(model, x_tilde, spec, theta=theta))
    return region_dice(rand, clean, np.asarray(mask).astype(bool))


def np_as_f32(a):
    return np.asarray(a, dtype=np.float32)


def run_adaptation_study(
    cotrained_ckpt,
    lesion_subjects: list[Subject],
    sup: tuple[np.ndarray, np.ndarray],
    adapt_cfg: AdaptConfig,
    seed: int,
    out_dir,
    heldout_fill: float = -2.0,
) -> dict:
    """Adaptation behaviour on lesioned phantoms.

    Per subject: the adaptation-loss trace (first vs final value) and the
    clean-vs-randomized prediction consistency for a fill value that was
    never used in the adaptation, before and after adapting.
    """
    model, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    os.makedirs(out_dir, exist_ok=True)
    spec = adapt_cfg.patch_spec
    fills = substream_rng(seed, "fills", "adaptation-study")
    candidates = [f for f in adapt_cfg.fill_values if f != heldout_fill]
    rows = []
    trace_rows = []
    for sub in lesion_subjects:
        fill = candidates[int(fills.integers(len(candidates)))]
        before = _hard_consistency_dice(model, None, sub.t1, sub.lesion, heldout_fill, spec)
        res = adapt(model, sub.t1, sub.lesion, sup, fill, adapt_cfg)
        after = _hard_consistency_dice(model, res.theta, sub.t1, sub.lesion, heldout_fill, spec)
        rows.append(
            [sub.subject_id, fill, res.trace[0], res.trace[-1], before, after]
        )
        for k, v in enumerate(res.trace):
            trace_rows.append([sub.subject_id, k, v])
    path = _write_rows(
        os.path.join(out_dir, "adaptation_study.csv"),
        [
            "subject_id",
            "fill",
            "inner_loss_first",
            "inner_loss_final",
            "consistency_before",
            "consistency_after",
        ],
        rows,
    )
    trace_path = _write_rows(
        os.path.join(out_dir, "adaptation_trace.csv"),
        ["subject_id", "step", "inner_loss"],
        trace_rows,
    )
    decreased = sum(1 for r in rows if r[3] < r[2])
    improved = sum(1 for r in rows if r[5] >= r[4])
    return {
        "csv": path,
        "trace_csv": trace_path,
        "n": len(rows),
        "loss_decreased": decreased,
        "consistency_improved": improved,
        "rows": rows,
    }


def joint_ground_truth(sub: Subject) -> np.ndarray:
    if sub.full_gt is None:
        raise InputError(f"subject {sub.subject_id} lacks full ground truth")
    return paste_lesion(sub.full_gt, sub.lesion)


def run_degradation_study(
    cotrained_ckpt,
    lesion_branch_ckpt,
    lesion_subjects: list[Subject],
    fractions: tuple[float, ...],
    adapt_cfg: AdaptConfig,
    sup: tuple[np.ndarray, np.ndarray],
    seed: int,
    out_dir,
) -> dict:
    """Anatomy quality of the co-trained branch when the adaptation mask
    loses whole blocks of the predicted lesion.

    Per fraction and subject: the predicted lesion mask is degraded, the
    degraded mask drives adaptation, and the full predicted mask is pasted
    over the adapted anatomy output, so errors beneath predicted lesion
    voxels are ignored (reported in the table footnote).
    """
    model, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    lesion_model, lesion_meta = load_checkpoint(lesion_branch_ckpt, expect_stage="pretrained")
    if lesion_meta["extra"].get("branch") != "lesion":
        raise ConfigError("degradation study needs a lesion-branch checkpoint")
    spec = adapt_cfg.patch_spec
    fills = substream_rng(seed, "fills", "degradation")
    os.makedirs(out_dir, exist_ok=True)

    predicted = {}
    for sub in lesion_subjects:
        probs = predict_lesion_volume(lesion_model, sub.flair, spec)
        predicted[sub.subject_id] = (np.argmax(probs, axis=0) == 1).astype(np.uint8)

    table = {}
    rows = []
    for fraction in fractions:
        per_class = {c: [] for c in REPORT_CLASSES}
        for i, sub in enumerate(lesion_subjects):
            pred_mask = predicted[sub.subject_id]
            if pred_mask.sum() == 0:
                continue
            degraded = degrade_lesion_mask(
                LesionMask(data=pred_mask),
                DegradationSpec(fraction=fraction, seed=substream_rng(seed, "deg", i).integers(1 << 31)),
            )
            fill = adapt_cfg.fill_values[int(fills.integers(len(adapt_cfg.fill_values)))]
            res = adapt(model, sub.t1, degraded.data, sup, fill, adapt_cfg)
            anat = anatomy_ids_from_probs(
                predict_anatomy_volume(model, sub.t1, spec, theta=res.theta)
            )
            pred_joint = paste_lesion(anat, pred_mask)
            gt = joint_ground_truth(sub)
            for c in REPORT_CLASSES:
                per_class[c].append(dice_score(pred_joint, gt, c))
        table[fraction] = {c: float(np.mean(v)) for c, v in per_class.items() if v}
        rows.append(
            [f"{fraction:g}"] + [f"{table[fraction][c]:.6f}" for c in REPORT_CLASSES]
        )
    path = _write_rows(
        os.path.join(out_dir, "degradation_study.csv"),
        ["retained_fraction"] + [CLASS_NAMES[c] for c in REPORT_CLASSES],
        rows,
    )
    with open(os.path.join(out_dir, "degradation_study_footnote.txt"), "w") as fh:
        fh.write(
            "Convention: the full predicted lesion mask is pasted over the "
            "anatomy output, so anatomy errors under predicted lesion voxels "
            "are ignored; only the adaptation mask is degraded.\n"
        )
    anatomy_means = {
        f: float(np.mean([t[c] for c in ANATOMY_REPORT_CLASSES])) for f, t in table.items()
    }
    return {"csv": path, "table": table, "anatomy_means": anatomy_means}


def evaluate_pretrained_anatomy(
    ckpt, subjects: list[Subject], patch_spec: PatchSpec, out_csv=None
) -> dict:
    """Per-class Dice/HD95 of the anatomy branch on lesion-free subjects."""
    from .metrics import metric_rows, write_metrics_csv

    model, meta = load_checkpoint(ckpt, expect_stage="pretrained")
    if meta["extra"].get("branch") != "anatomy":
        raise ConfigError("need an anatomy-branch checkpoint")
    rows = []
    per_class = {c: [] for c in ANATOMY_CLASS_IDS}
    for sub in subjects:
        ids = anatomy_ids_from_probs(predict_anatomy_volume(model, sub.t1, patch_spec))
        rows.extend(
            metric_rows(
                sub.subject_id, ids, sub.anatomy, "pretrained_anatomy",
                spacing=sub.spacing, class_ids=ANATOMY_CLASS_IDS,
            )
        )
        for c in ANATOMY_CLASS_IDS:
            per_class[c].append(dice_score(ids, sub.anatomy, c))
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return {
        "per_class_mean": {CLASS_NAMES[c]: float(np.mean(v)) for c, v in per_class.items()},
        "rows": rows,
    }


def evaluate_lesion_branch(
    fold_ckpts, subjects: list[Subject], patch_spec: PatchSpec, out_csv=None
) -> dict:
    """Lesion Dice of the fold ensemble (majority vote) and of each fold."""
    from .metrics import majority_vote, metric_rows, write_metrics_csv

    models = []
    for p in fold_ckpts:
        model, meta = load_checkpoint(p, expect_stage="pretrained")
        if meta["extra"].get("branch") != "lesion":
            raise ConfigError(f"{p} is not a lesion-branch checkpoint")
        models.append(model)
    rows = []
    vote_dices = []
    fold_dices = [[] for _ in models]
    for sub in subjects:
        preds = []
        for k, model in enumerate(models):
            probs = predict_lesion_volume(model, sub.flair, patch_spec)
            pred = (np.argmax(probs, axis=0) == 1).astype(np.uint8)
            fold_dices[k].append(dice_score(pred, sub.lesion, 1))
            preds.append(LabelMap(data=pred.astype(np.int16), class_count=2))
        vote = majority_vote(preds).data.astype(np.uint8)
        vote_dices.append(dice_score(vote, sub.lesion, 1))
        rows.extend(
            metric_rows(
                sub.subject_id, paste_lesion(np.zeros_like(vote), vote),
                paste_lesion(np.zeros_like(vote), sub.lesion),
                "pretrained_lesion", spacing=sub.spacing, class_ids=(LESION,),
            )
        )
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return {
        "vote_dice": float(np.mean(vote_dices)),
        "fold_dice": [float(np.mean(d)) for d in fold_dices],
        "rows": rows,
    }


def evaluate_cotrained(
    cotrained_ckpt,
    lesion_branch_ckpt,
    subjects: list[Subject],
    adapt_cfg: AdaptConfig,
    sup: tuple[np.ndarray, np.ndarray],
    seed: int,
    out_csv=None,
) -> dict:
    """Anatomy branch with adaptation on predicted lesion masks; the
    predicted mask is pasted over the output before scoring against the
    joint ground truth."""
    from .metrics import metric_rows, write_metrics_csv

    model, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    lesion_model, lesion_meta = load_checkpoint(lesion_branch_ckpt, expect_stage="pretrained")
    if lesion_meta["extra"].get("branch") != "lesion":
        raise ConfigError("need a lesion-branch checkpoint")
    spec = adapt_cfg.patch_spec
    fills = substream_rng(seed, "fills", "eval-cotrained")
    rows = []
    per_class = {c: [] for c in REPORT_CLASSES}
    for sub in subjects:
        probs = predict_lesion_volume(lesion_model, sub.flair, spec)
        pred_mask = (np.argmax(probs, axis=0) == 1).astype(np.uint8)
        fill = adapt_cfg.fill_values[int(fills.integers(len(adapt_cfg.fill_values)))]
        res = adapt(model, sub.t1, pred_mask, sup, fill, adapt_cfg)
        anat = anatomy_ids_from_probs(
            predict_anatomy_volume(model, sub.t1, spec, theta=res.theta)
        )
        pred_joint = paste_lesion(anat, pred_mask)
        gt = joint_ground_truth(sub)
        rows.extend(
            metric_rows(sub.subject_id, pred_joint, gt, "cotrained",
                        spacing=sub.spacing, class_ids=REPORT_CLASSES)
        )
        for c in REPORT_CLASSES:
            per_class[c].append(dice_score(pred_joint, gt, c))
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return {
        "per_class_mean": {CLASS_NAMES[c]: float(np.mean(v)) for c, v in per_class.items()},
        "rows": rows,
    }


def evaluate_joint(
    checkpoints,
    subjects: list[Subject],
    adapt_cfg: AdaptConfig,
    sup: tuple[np.ndarray, np.ndarray],
    fill_values: tuple[float, ...],
    out_csv=None,
    stage: str = "joint",
    member_dir=None,
) -> dict:
    """Full joint inference (ensemble when folds x fills > 1) against the
    composed joint ground truth."""
    from .adapt import EnsembleSpec, infer_ensemble
    from .metrics import metric_rows, write_metrics_csv

    spec = EnsembleSpec(checkpoints=tuple(str(c) for c in checkpoints), fill_values=tuple(fill_values))
    rows = []
    per_class = {c: [] for c in REPORT_CLASSES}
    for sub in subjects:
        ens = infer_ensemble(
            spec, sub.t1, sub.flair, sup, adapt_cfg,
            out_dir=member_dir, subject_id=sub.subject_id,
        )
        gt = joint_ground_truth(sub)
        rows.extend(
            metric_rows(sub.subject_id, ens.y_joint.data, gt, stage,
                        spacing=sub.spacing, class_ids=REPORT_CLASSES)
        )
        for c in REPORT_CLASSES:
            per_class[c].append(dice_score(ens.y_joint.data, gt, c))
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return {
        "per_class_mean": {CLASS_NAMES[c]: float(np.mean(v)) for c, v in per_class.items()},
        "rows": rows,
    }


def run_mask_source_study(
    cotrained_ckpt,
    lesion_branch_ckpt,
    lesion_train: list[Subject],
    soft_targets: dict[str, str],
    sup_subjects: list[Subject],
    lesion_test: list[Subject],
    cfg: TrainConfig,
    adapt_cfg: AdaptConfig,
    out_dir,
) -> dict:
    """Two joint trainings differing only in the inner-loss mask source
    (ground-truth vs predicted lesions), evaluated on held-out subjects."""
    from .training import joint_train

    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for source in ("gt", "predicted"):
        stage = joint_train(
            cotrained_ckpt,
            lesion_branch_ckpt,
            lesion_train,
            soft_targets,
            sup_subjects,
            cfg,
            os.path.join(out_dir, source),
            mask_source=source,
            name=f"joint_{source}",
        )
        model, _ = load_checkpoint(stage.checkpoint, expect_stage="joint")
        per_class = {c: [] for c in REPORT_CLASSES}
        fills = substream_rng(cfg.seed, "fills", "mask-source", source)
        sup = (sup_subjects[0].t1, sup_subjects[0].anatomy)
        for sub in lesion_test:
            fill = cfg.fill_spec.draw(fills)
            pred = infer_single(model, sub.t1, sub.flair, sup, fill, adapt_cfg)
            gt = joint_ground_truth(sub)
            for c in REPORT_CLASSES:
                per_class[c].append(dice_score(pred.y_joint.data, gt, c))
        results[source] = {c: float(np.mean(v)) for c, v in per_class.items()}
    rows = [
        [source] + [f"{results[source][c]:.6f}" for c in REPORT_CLASSES]
        for source in ("gt", "predicted")
    ]
    path = _write_rows(
        os.path.join(out_dir, "mask_source_study.csv"),
        ["mask_source"] + [CLASS_NAMES[c] for c in REPORT_CLASSES],
        rows,
    )
    return {"csv": path, "table": results}
