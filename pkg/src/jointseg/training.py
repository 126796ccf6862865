"""Training stages: task-specific pretraining, meta co-training with an
inner adaptation step, pseudolabel generation and joint training.

Every stage consumes and emits tagged checkpoints, logs per-step losses
to an append-only CSV, and derives all randomness from named substreams
of one seed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nifti
from .adapt import AdaptConfig, adapt, predict_anatomy_volume, predict_lesion_volume
from .datasets import Subject
from .errors import ConfigError, InputError, TrainingError
from .labels import ANATOMY_CLASS_IDS, LESION
from .losses import LossValue, compose_fill, inner_loss, outer_loss, soft_dice_loss
from .networks import (
    ExtractorConfig,
    FusionHead,
    JointSegModel,
    ParamSet,
    anatomy_one_hot,
    component_state,
    load_checkpoint,
    save_checkpoint,
    state_fingerprint,
)
from .phantom import RandomFillSpec, compose_pseudo_lesion
from .seeds import substream_rng, substream_seed
from .volume import LabelMap, LesionMask, PatchSpec, Volume, crop_patch


@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for all training stages.

    ``inner_step_size`` is the plain gradient step of the inner update;
    the outer objective uses Adam at ``outer_lr``. Epoch defaults are desk
    scale; paper scale (150/100/50, 128-voxel patches, 5-level extractors)
    is reachable through the same fields.
    """

    inner_step_size: float = 0.005
    outer_lr: float = 0.001
    pretrain_epochs: int = 30
    meta_epochs: int = 20
    joint_epochs: int = 10
    batch_size: int = 2
    patch_size: int = 32
    fill_spec: RandomFillSpec = field(default_factory=RandomFillSpec)
    lesion_gate: bool = True
    fold_count: int = 5
    fold_index: int = 0
    seed: int = 0
    patches_per_subject: int = 2
    augment: bool = True
    gain_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    lesion_patch_bias: float = 0.8
    val_loss_threshold: float = 0.35
    # The fusion head starts from scratch; a head-only warmup (frozen
    # branches, no inner step) brings it to a sane state before the
    # meta-coupled joint epochs, otherwise its early gradients degrade the
    # pretrained extractor before rare classes are ever learned.
    joint_warmup_epochs: int = 30
    joint_extractor_lr_scale: float = 1.0
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        if self.inner_step_size < 0:
            raise ConfigError("inner step size must be >= 0")
        if self.outer_lr <= 0:
            raise ConfigError("outer learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.patch_size % self.extractor.divisor:
            raise ConfigError(
                f"patch size {self.patch_size} not divisible by {self.extractor.divisor}"
            )


class LossLog:
    """Append-only CSV loss log: stage, epoch, step, metric, value."""

    def __init__(self, path):
        self.path = os.fspath(path)
        if not os.path.exists(self.path):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["stage", "epoch", "step", "metric", "value"])

    def write(self, stage, epoch, step, **metrics):
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for name, value in metrics.items():
                if isinstance(value, torch.Tensor):
                    value = value.detach()
                w.writerow([stage, epoch, step, name, f"{float(value):.8f}"])


def read_loss_log(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["epoch"] = int(row["epoch"])
            row["step"] = int(row["step"])
            row["value"] = float(row["value"])
            rows.append(row)
    return rows


def _augmented(arr: np.ndarray, rng, cfg: TrainConfig) -> np.ndarray:
    if not cfg.augment:
        return arr
    gain = rng.uniform(*cfg.gain_range)
    shift = rng.uniform(*cfg.shift_range)
    return (arr * gain + shift).astype(np.float32)


def _random_offset(shape, patch, rng):
    return tuple(int(rng.integers(0, d - patch + 1)) for d in shape)


def _lesion_biased_offset(mask, patch, rng, bias):
    """Center the patch window on a random lesion voxel with probability
    ``bias``; otherwise sample uniformly."""
    shape = mask.shape
    if mask.sum() == 0 or rng.random() > bias:
        return _random_offset(shape, patch, rng)
    vox = np.argwhere(mask)
    c = vox[int(rng.integers(len(vox)))]
    return tuple(
        int(np.clip(c[a] - patch // 2 + rng.integers(-4, 5), 0, shape[a] - patch))
        for a in range(3)
    )


def _check_patchable(shape, patch):
    if min(shape) < patch:
        raise ConfigError(f"volume shape {shape} smaller than patch {patch}")


def _stack(items) -> torch.Tensor:
    return torch.as_tensor(np.stack(items, axis=0))


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _guard_finite(value, model, out_dir, stage):
    if torch.isfinite(value):
        return
    path = os.path.join(out_dir, f"{stage}_lastgood.pt")
    save_checkpoint(path, "pretrained" if "pretrain" in stage else "cotrained", model)
    raise TrainingError(f"{stage}: non-finite loss; last-good checkpoint at {path}")


@dataclass
class StageResult:
    checkpoint: str
    log: str
    extra: dict = field(default_factory=dict)


def pretrain_anatomy(
    train: list[Subject], val: list[Subject], cfg: TrainConfig, out_dir
) -> StageResult:
    """Supervised Dice training of the T1 extractor and anatomy head on
    lesion-free subjects."""
    if not train:
        raise InputError("no training subjects")
    for s in train + val:
        if s.anatomy is None or s.t1 is None:
            raise InputError(f"subject {s.subject_id} lacks T1 or anatomy labels")
        _check_patchable(s.t1.shape, cfg.patch_size)
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(substream_seed(cfg.seed, "init", "anatomy"))
    model = JointSegModel(cfg.extractor)
    model.train()
    params = list(model.extractor_t1.parameters()) + list(model.anatomy_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.outer_lr)
    rng = substream_rng(cfg.seed, "data", "pretrain-anatomy")
    log = LossLog(os.path.join(out_dir, "pretrain_anatomy_loss.csv"))

    step = 0
    for epoch in range(cfg.pretrain_epochs):
        tasks = [s for s in train for _ in range(cfg.patches_per_subject)]
        rng.shuffle(tasks)
        for i in range(0, len(tasks), cfg.batch_size):
            batch = tasks[i : i + cfg.batch_size]
            xs, ys = [], []
            for sub in batch:
                img = _augmented(sub.t1, rng, cfg)
                off = _random_offset(img.shape, cfg.patch_size, rng)
                xs.append(crop_patch(img, off, cfg.patch_size)[None])
                ys.append(crop_patch(sub.anatomy, off, cfg.patch_size))
            x = _stack(xs)
            y = _stack(ys).long()
            probs = model.predict_anatomy(model.forward_t1(x))
            lv = soft_dice_loss(probs, anatomy_one_hot(y))
            _guard_finite(lv.value, model, out_dir, "pretrain_anatomy")
            opt.zero_grad()
            lv.value.backward()
            opt.step()
            log.write("pretrain_anatomy", epoch, step, loss=lv.value)
            step += 1

    val_loss = validate_anatomy(model, val or train, cfg)
    if val_loss > cfg.val_loss_threshold:
        raise TrainingError(
            f"pretrain_anatomy: held-out soft Dice loss {val_loss:.4f} exceeds "
            f"threshold {cfg.val_loss_threshold}"
        )
    ckpt = os.path.join(out_dir, "anatomy_pretrained.pt")
    save_checkpoint(ckpt, "pretrained", model, extra={"branch": "anatomy", "val_loss": val_loss})
    return StageResult(checkpoint=ckpt, log=log.path, extra={"val_loss": val_loss})


def validate_anatomy(model, subjects, cfg: TrainConfig) -> float:
    """Mean soft Dice loss of the anatomy path over full volumes."""
    spec = PatchSpec(patch_size=cfg.patch_size, overlap=0)
    losses = []
    model.eval()
    for sub in subjects:
        probs = predict_anatomy_volume(model, sub.t1, spec)
        target = anatomy_one_hot(torch.as_tensor(sub.anatomy[None].astype(np.int64)))
        lv = soft_dice_loss(torch.as_tensor(probs[None]), target)
        losses.append(lv.item())
    model.train()
    return float(np.mean(losses))


def pretrain_lesion(
    pool: list[Subject], cfg: TrainConfig, out_dir
) -> tuple[list[StageResult], dict]:
    """Train one FLAIR extractor + lesion head per random train/val split.

    Returns per-fold results and the fold assignment mapping (recorded by
    the caller in the run manifest).
    """
    if len(pool) < cfg.fold_count:
        raise InputError("fewer lesion subjects than folds")
    for s in pool:
        if s.flair is None or s.lesion is None:
            raise InputError(f"subject {s.subject_id} lacks FLAIR or lesion labels")
        _check_patchable(s.flair.shape, cfg.patch_size)
    os.makedirs(out_dir, exist_ok=True)
    fold_rng = substream_rng(cfg.seed, "data", "lesion-folds")
    n_val = max(2, len(pool) // 6)
    results = []
    assignments = {}
    for k in range(cfg.fold_count):
        order = fold_rng.permutation(len(pool))
        val_ids = [pool[i].subject_id for i in order[:n_val]]
        train = [pool[i] for i in order[n_val:]]
        val = [pool[i] for i in order[:n_val]]
        assignments[f"fold{k}"] = {"val": val_ids}

        torch.manual_seed(substream_seed(cfg.seed, "init", "lesion", k))
        model = JointSegModel(cfg.extractor)
        model.train()
        params = list(model.extractor_flair.parameters()) + list(model.lesion_head.parameters())
        opt = torch.optim.Adam(params, lr=cfg.outer_lr)
        rng = substream_rng(cfg.seed, "data", "pretrain-lesion", k)
        log = LossLog(os.path.join(out_dir, f"pretrain_lesion_fold{k}_loss.csv"))

        step = 0
        for epoch in range(cfg.pretrain_epochs):
            tasks = [s for s in train for _ in range(cfg.patches_per_subject)]
            rng.shuffle(tasks)
            for i in range(0, len(tasks), cfg.batch_size):
                batch = tasks[i : i + cfg.batch_size]
                xs, ys = [], []
                for sub in batch:
                    img = _augmented(sub.flair, rng, cfg)
                    off = _lesion_biased_offset(
                        sub.lesion, cfg.patch_size, rng, cfg.lesion_patch_bias
                    )
                    xs.append(crop_patch(img, off, cfg.patch_size)[None])
                    ys.append(crop_patch(sub.lesion, off, cfg.patch_size))
                x = _stack(xs)
                y = _stack(ys).long()
                target = torch.nn.functional.one_hot(y, 2).movedim(-1, 1).float()
                probs = model.predict_lesion(model.forward_flair(x))
                lv = soft_dice_loss(probs, target)
                _guard_finite(lv.value, model, out_dir, f"pretrain_lesion_fold{k}")
                opt.zero_grad()
                lv.value.backward()
                opt.step()
                log.write(f"pretrain_lesion_fold{k}", epoch, step, loss=lv.value)
                step += 1

        val_dice = validate_lesion(model, val, cfg)
        ckpt = os.path.join(out_dir, f"lesion_fold{k}.pt")
        save_checkpoint(
            ckpt,
            "pretrained",
            model,
            extra={"branch": "lesion", "fold": k, "val_dice": val_dice, "val_subjects": val_ids},
        )
        results.append(StageResult(checkpoint=ckpt, log=log.path, extra={"val_dice": val_dice}))
    return results, assignments


def validate_lesion(model, subjects, cfg: TrainConfig) -> float:
    from .metrics import dice_score

    spec = PatchSpec(patch_size=cfg.patch_size, overlap=0)
    scores = []
    model.eval()
    for sub in subjects:
        probs = predict_lesion_volume(model, sub.flair, spec)
        pred = (np.argmax(probs, axis=0) == 1).astype(np.uint8)
        scores.append(dice_score(pred, sub.lesion, 1))
    model.train()
    return float(np.mean(scores))


def inner_step(theta: ParamSet, loss, alpha: float, create_graph: bool = True) -> ParamSet:
    """One plain gradient step on the inner loss: theta - alpha * grad.

    ``loss`` is either a LossValue/tensor whose graph reaches ``theta`` or
    a callable evaluated at ``theta``. The input set is never mutated and,
    with ``create_graph``, outer gradients flow through the result.
    """
    if callable(loss):
        loss = loss(theta)
    value = loss.value if isinstance(loss, LossValue) else loss
    grads = torch.autograd.grad(value, list(theta.values()), create_graph=create_graph)
    if not all(torch.isfinite(g).all() for g in grads):
        raise TrainingError("non-finite gradient in inner step")
    return ParamSet((n, p - alpha * g) for (n, p), g in zip(theta.items(), grads))


def _require_branch(meta: dict, branch: str, path):
    if meta["extra"].get("branch") != branch:
        raise ConfigError(
            f"checkpoint {path} is a {meta['extra'].get('branch')!r} branch, "
            f"expected {branch!r}"
        )


@dataclass
class _MetaBatch:
    x_p: torch.Tensor
    x_tilde: torch.Tensor
    x_a: torch.Tensor
    y_a: torch.Tensor
    mask: torch.Tensor
    x_sup: torch.Tensor
    y_sup: torch.Tensor
    n_dropped: int = 0


def _assemble_meta_batch(
    pairs, sup_pool, cfg: TrainConfig, rng, fills_rng
) -> _MetaBatch | None:
    """Build one meta batch from (anatomy, donor) pairs.

    Patches without lesion voxels are dropped when the gate is on; returns
    None when nothing survives.
    """
    xs_p, xs_t, xs_a, ys_a, ms, xs_s, ys_s = [], [], [], [], [], [], []
    dropped = 0
    for sub_a, donor in pairs:
        img_a = _augmented(sub_a.t1, rng, cfg)
        sample = compose_pseudo_lesion(
            Volume(data=img_a),
            LabelMap(data=sub_a.anatomy),
            Volume(data=donor.t1),
            LesionMask(data=donor.lesion),
        )
        off = _lesion_biased_offset(
            sample.y_l.data, cfg.patch_size, rng, cfg.lesion_patch_bias
        )
        m = crop_patch(sample.y_l.data, off, cfg.patch_size).astype(np.float32)
        fill = cfg.fill_spec.draw(fills_rng)
        sup = sup_pool[int(rng.integers(len(sup_pool)))]
        sup_img = _augmented(sup.t1, rng, cfg)
        sup_off = _random_offset(sup_img.shape, cfg.patch_size, rng)
        if cfg.lesion_gate and m.sum() == 0:
            dropped += 1
            continue
        x_p = crop_patch(sample.x_p.data, off, cfg.patch_size).astype(np.float32)
        xs_p.append(x_p[None])
        xs_t.append(compose_fill(x_p, m, np.float32(fill))[None])
        xs_a.append(crop_patch(img_a, off, cfg.patch_size)[None])
        ys_a.append(crop_patch(sub_a.anatomy, off, cfg.patch_size))
        ms.append(m[None])
        xs_s.append(crop_patch(sup_img, sup_off, cfg.patch_size)[None])
        ys_s.append(crop_patch(sup.anatomy, sup_off, cfg.patch_size))
    if not xs_p:
        return None
    return _MetaBatch(
        x_p=_stack(xs_p),
        x_tilde=_stack(xs_t),
        x_a=_stack(xs_a),
        y_a=_stack(ys_a).long(),
        mask=_stack(ms),
        x_sup=_stack(xs_s),
        y_sup=_stack(ys_s).long(),
        n_dropped=dropped,
    )


def meta_step(
    model: JointSegModel,
    opt,
    batch: _MetaBatch,
    cfg: TrainConfig,
    inner_enabled: bool = True,
) -> dict:
    """One outer update; differentiates through one inner gradient step.

    With the inner step disabled the outer loss is minimized directly at
    the current parameters, which equals the inner_step_size = 0 case.
    """
    stats = {}
    if inner_enabled:
        li = inner_loss(
            model, batch.x_sup, batch.y_sup, batch.x_p, batch.mask, x_tilde=batch.x_tilde
        )
        theta_prime = inner_step(model.theta(), li, cfg.inner_step_size)
        stats["inner"] = float(li.value.detach())
        stats["inner_consistency"] = float(li.terms["consistency"].detach())
        stats["inner_supervision"] = float(li.terms["supervision"].detach())
    else:
        theta_prime = model.theta()
    lo = outer_loss(model, theta_prime, batch.x_p, batch.x_tilde, batch.x_a, batch.y_a)
    if not torch.isfinite(lo.value):
        raise TrainingError("non-finite outer loss")
    opt.zero_grad()
    lo.value.backward()
    opt.step()
    stats["outer"] = float(lo.value.detach())
    return stats


def meta_cotrain(
    pretrained_ckpt,
    anatomy_train: list[Subject],
    lesion_train: list[Subject],
    cfg: TrainConfig,
    out_dir,
    inner_enabled: bool = True,
    name: str = "cotrained",
) -> StageResult:
    """Co-training with meta updates on regenerated pseudo-lesioned pairs.

    Each outer step adapts the T1 extractor by one inner gradient step on
    the adaptation loss, then updates it with Adam on the outer loss of
    the adapted parameters. Meta updates are gated to patches containing
    lesion voxels. ``inner_enabled=False`` is the ablation control that
    trains on the outer loss alone.
    """
    model, meta = load_checkpoint(pretrained_ckpt, expect_stage="pretrained")
    _require_branch(meta, "anatomy", pretrained_ckpt)
    if not anatomy_train or not lesion_train:
        raise InputError("meta co-training needs both datasets")
    os.makedirs(out_dir, exist_ok=True)
    model.train()
    opt = torch.optim.Adam(model.extractor_t1.parameters(), lr=cfg.outer_lr)
    rng = substream_rng(cfg.seed, "data", "meta")
    fills_rng = substream_rng(cfg.seed, "fills", "meta")
    log = LossLog(os.path.join(out_dir, f"{name}_loss.csv"))

    step = 0
    skipped = 0
    for epoch in range(cfg.meta_epochs):
        order = rng.permutation(len(anatomy_train))
        pairs = [
            (anatomy_train[i], lesion_train[int(rng.integers(len(lesion_train)))])
            for i in order
        ]
        for i in range(0, len(pairs), cfg.batch_size):
            batch = _assemble_meta_batch(
                pairs[i : i + cfg.batch_size], anatomy_train, cfg, rng, fills_rng
            )
            if batch is None:
                skipped += 1
                continue
            skipped += batch.n_dropped
            stats = meta_step(model, opt, batch, cfg, inner_enabled=inner_enabled)
            log.write(name, epoch, step, **stats)
            step += 1

    ckpt = os.path.join(out_dir, f"{name}.pt")
    save_checkpoint(
        ckpt,
        "cotrained",
        model,
        extra={
            "branch": "anatomy",
            "inner_enabled": inner_enabled,
            "lineage": [os.fspath(pretrained_ckpt)],
            "gated_patches": skipped,
        },
    )
    return StageResult(checkpoint=ckpt, log=log.path, extra={"gated_patches": skipped})


def generate_pseudolabels(
    cotrained_ckpt,
    lesion_subjects: list[Subject],
    sup_subjects: list[Subject],
    cfg: TrainConfig,
    adapt_cfg: AdaptConfig,
    out_dir,
) -> dict:
    """Per-subject soft joint targets from the adapted anatomy branch.

    The ground-truth lesion mask drives the adaptation; the adapted
    anatomy probabilities are scaled to the healthy-region mass and the
    mask fills the lesion channel, so channels sum to one. Subjects whose
    adaptation loss rises at every step are flagged and excluded.
    """
    model, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    os.makedirs(out_dir, exist_ok=True)
    rng = substream_rng(cfg.seed, "fills", "pseudolabel")
    spec = adapt_cfg.patch_spec
    index = {}
    excluded = []
    for i, sub in enumerate(lesion_subjects):
        sup = sup_subjects[i % len(sup_subjects)]
        fill = cfg.fill_spec.draw(rng)
        res = adapt(
            model, sub.t1, sub.lesion, (sup.t1, sup.anatomy), fill, adapt_cfg
        )
        t = res.trace
        diverged = res.failed or (
            len(t) > 1 and all(t[i + 1] > t[i] for i in range(len(t) - 1))
        )
        if diverged:
            excluded.append(sub.subject_id)
            continue
        anat = predict_anatomy_volume(model, sub.t1, spec, theta=res.theta)
        y_l = sub.lesion.astype(np.float32)
        soft = np.zeros((anat.shape[0] + 1,) + sub.t1.shape, dtype=np.float32)
        for ch, cid in enumerate(ANATOMY_CLASS_IDS):
            soft[cid] = anat[ch] * (1.0 - y_l)
        soft[LESION] = y_l
        path = os.path.join(out_dir, f"{sub.subject_id}_soft.npz")
        nifti.save_arrays(path, soft=soft, lesion=sub.lesion)
        index[sub.subject_id] = path
    return {"targets": index, "excluded": excluded}


def _warm_start_fusion_classifier(model: JointSegModel) -> None:
    """Seed the fused classifier from the pretrained task heads.

    The fused features are the tissue features plus a gated additive term,
    so the task heads are natural initial linear readouts: anatomy rows
    copy the anatomy head, the lesion row takes the lesion head's
    foreground-minus-background direction. A cold-started classifier
    tends to suppress the rare lesion class under the per-class Dice
    objective before it ever becomes competitive.
    """
    with torch.no_grad():
        w = model.fusion.classifier.weight
        b = model.fusion.classifier.bias
        w.zero_()
        b.zero_()
        for ch, cid in enumerate(ANATOMY_CLASS_IDS):
            w[cid] = model.anatomy_head.conv.weight[ch]
            b[cid] = model.anatomy_head.conv.bias[ch]
        w[LESION] = model.lesion_head.conv.weight[1] - model.lesion_head.conv.weight[0]
        b[LESION] = model.lesion_head.conv.bias[1] - model.lesion_head.conv.bias[0]


def joint_train(
    cotrained_ckpt,
    lesion_branch_ckpt,
    lesion_subjects: list[Subject],
    soft_targets: dict[str, str],
    sup_subjects: list[Subject],
    cfg: TrainConfig,
    out_dir,
    mask_source: str = "gt",
    name: str = "joint",
) -> StageResult:
    """Train the fusion head and the T1 extractor against soft targets.

    The FLAIR branch is loaded from a pretrained lesion checkpoint and
    kept frozen (parameters and statistics); each step takes one inner
    adaptation step for the T1 extractor before optimizing the fused
    prediction toward the subject's soft target. ``mask_source`` selects
    the inner-loss mask: the ground-truth lesion or the FLAIR branch's
    prediction.
    """
    if mask_source not in ("gt", "predicted"):
        raise ConfigError(f"mask_source must be 'gt' or 'predicted', got {mask_source!r}")
    model, _ = load_checkpoint(cotrained_ckpt, expect_stage="cotrained")
    lesion_payload, lesion_meta = load_checkpoint(lesion_branch_ckpt, expect_stage="pretrained")
    _require_branch(lesion_meta, "lesion", lesion_branch_ckpt)
    model.load_state_dict(
        component_state(lesion_payload, ("extractor_flair", "lesion_head")), strict=False
    )
    torch.manual_seed(substream_seed(cfg.seed, "init", "fusion"))
    model.fusion = FusionHead(cfg.extractor.feature_channels)
    _warm_start_fusion_classifier(model)
    os.makedirs(out_dir, exist_ok=True)

    active = [s for s in lesion_subjects if s.subject_id in soft_targets]
    if not active:
        raise InputError("no lesion subjects with soft targets")
    targets = {
        s.subject_id: nifti.load_arrays(soft_targets[s.subject_id])["soft"] for s in active
    }
    spec = PatchSpec(patch_size=cfg.patch_size, overlap=0)
    masks = {}
    for s in active:
        if mask_source == "gt":
            masks[s.subject_id] = s.lesion
        else:
            probs = predict_lesion_volume(model, s.flair, spec)
            masks[s.subject_id] = (np.argmax(probs, axis=0) == 1).astype(np.uint8)

    for p in model.extractor_flair.parameters():
        p.requires_grad_(False)
    for p in model.lesion_head.parameters():
        p.requires_grad_(False)
    phi_before = state_fingerprint(component_state(model, ("extractor_flair",)))

    opt = torch.optim.Adam(
        [
            {
                "params": list(model.extractor_t1.parameters()),
                "lr": cfg.outer_lr * cfg.joint_extractor_lr_scale,
            },
            {"params": list(model.fusion.parameters()), "lr": cfg.outer_lr},
        ]
    )
    rng = substream_rng(cfg.seed, "data", "joint")
    fills_rng = substream_rng(cfg.seed, "fills", "joint")
    log = LossLog(os.path.join(out_dir, f"{name}_loss.csv"))

    # Head-only warmup: both extractors fixed (eval mode, no gradients),
    # plain Dice of the fused prediction against the soft target.
    warm_rng = substream_rng(cfg.seed, "data", "joint-warmup")
    warm_opt = torch.optim.Adam(model.fusion.parameters(), lr=cfg.outer_lr)
    for epoch in range(cfg.joint_warmup_epochs):
        model.train()
        model.extractor_t1.eval()
        model.extractor_flair.eval()
        model.lesion_head.eval()
        order = warm_rng.permutation(len(active))
        for i in range(0, len(order), cfg.batch_size):
            members = [active[j] for j in order[i : i + cfg.batch_size]]
            xs_t, xs_f, tg = [], [], []
            for sub in members:
                off = _lesion_biased_offset(
                    masks[sub.subject_id], cfg.patch_size, warm_rng, cfg.lesion_patch_bias
                )
                xs_t.append(crop_patch(sub.t1, off, cfg.patch_size)[None])
                xs_f.append(crop_patch(sub.flair, off, cfg.patch_size)[None])
                tg.append(crop_patch(targets[sub.subject_id], off, cfg.patch_size))
            with torch.no_grad():
                w_t1 = model.forward_t1(_stack(xs_t))
                w_f = model.forward_flair(_stack(xs_f))
            lv = soft_dice_loss(model.fuse(w_t1, w_f), _stack(tg))
            if not torch.isfinite(lv.value):
                raise TrainingError("non-finite warmup loss")
            warm_opt.zero_grad()
            lv.value.backward()
            warm_opt.step()
        log.write(f"{name}_warmup", epoch, epoch, warmup=lv.value)

    step = 0
    skipped = 0
    for epoch in range(cfg.joint_epochs):
        model.train()
        # The frozen FLAIR branch serves fixed statistics; its buffers
        # must not drift during joint training.
        model.extractor_flair.eval()
        model.lesion_head.eval()
        order = rng.permutation(len(active))
        for i in range(0, len(order), cfg.batch_size):
            members = [active[j] for j in order[i : i + cfg.batch_size]]
            xs_t, xs_f, ms, tg, xs_s, ys_s, xt = [], [], [], [], [], [], []
            for sub in members:
                mask_vol = masks[sub.subject_id]
                off = _lesion_biased_offset(mask_vol, cfg.patch_size, rng, cfg.lesion_patch_bias)
                m = crop_patch(mask_vol, off, cfg.patch_size).astype(np.float32)
                fill = cfg.fill_spec.draw(fills_rng)
                sup = sup_subjects[int(rng.integers(len(sup_subjects)))]
                sup_off = _random_offset(sup.t1.shape, cfg.patch_size, rng)
                if cfg.lesion_gate and m.sum() == 0:
                    skipped += 1
                    continue
                img_t = _augmented(sub.t1, rng, cfg)
                img_f = _augmented(sub.flair, rng, cfg)
                x_t1 = crop_patch(img_t, off, cfg.patch_size).astype(np.float32)
                xs_t.append(x_t1[None])
                xs_f.append(crop_patch(img_f, off, cfg.patch_size)[None])
                ms.append(m[None])
                xt.append(compose_fill(x_t1, m, np.float32(fill))[None])
                tg.append(crop_patch(targets[sub.subject_id], off, cfg.patch_size))
                xs_s.append(crop_patch(sup.t1, sup_off, cfg.patch_size)[None])
                ys_s.append(crop_patch(sup.anatomy, sup_off, cfg.patch_size))
            if not xs_t:
                continue
            x_t1 = _stack(xs_t)
            x_f = _stack(xs_f)
            mask = _stack(ms)
            x_tilde = _stack(xt)
            target = _stack(tg)
            li = inner_loss(
                model, _stack(xs_s), _stack(ys_s).long(), x_t1, mask, x_tilde=x_tilde
            )
            theta_prime = inner_step(model.theta(), li, cfg.inner_step_size)
            w_t1 = model.forward_t1(x_t1, theta=theta_prime)
            w_f = model.forward_flair(x_f)
            probs = model.fuse(w_t1, w_f)
            lo = soft_dice_loss(probs, target)
            if not torch.isfinite(lo.value):
                raise TrainingError("non-finite joint loss")
            opt.zero_grad()
            lo.value.backward()
            opt.step()
            log.write(name, epoch, step, inner=li.value, outer=lo.value)
            step += 1

    phi_after = state_fingerprint(component_state(model, ("extractor_flair",)))
    if phi_before != phi_after:
        raise TrainingError("freeze contract violated: FLAIR branch changed")
    ckpt = os.path.join(out_dir, f"{name}.pt")
    save_checkpoint(
        ckpt,
        "joint",
        model,
        extra={
            "mask_source": mask_source,
            "phi_fingerprint": phi_after,
            "lineage": [os.fspath(cotrained_ckpt), os.fspath(lesion_branch_ckpt)],
            "gated_patches": skipped,
        },
    )
    return StageResult(
        checkpoint=ckpt,
        log=log.path,
        extra={"phi_fingerprint": phi_after, "mask_source": mask_source},
    )
