"""Per-subject inference-time adaptation and ensemble prediction.

Adaptation clones the T1 extractor parameters, minimizes the adaptation
loss over lesion-bearing patches with Adam, and returns the adapted set;
checkpoints and the model's stored parameters are never modified. Full
volumes are predicted patchwise and mean-blended.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputError, JointsegError
from .labels import ANATOMY_CLASS_IDS, NUM_CLASSES
from .losses import compose_fill, inner_loss
from .metrics import majority_vote
from .networks import JointSegModel, ParamSet, load_checkpoint
from .volume import LabelMap, LesionMask, PatchSpec, crop_patch, pad_to_patch, patch_grid, reassemble

_ANATOMY_IDS = np.array(ANATOMY_CLASS_IDS, dtype=np.uint8)


@dataclass(frozen=True)
class AdaptConfig:
    """Adaptation schedule: K optimizer steps with early stopping.

    Each step minimizes the adaptation loss over the ``max_patches``
    grid patches with the largest lesion overlap (batched), against a
    fixed central patch of the supervision subject, so consecutive trace
    entries are comparable.
    """

    steps: int = 10
    lr: float = 1e-4
    fill_values: tuple[float, ...] = (-5.0, -2.0, -1.0, 1.0, 2.0, 5.0)
    patience: int = 3
    patch_size: int = 32
    patch_overlap: int = 8
    max_patches: int = 2

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("adaptation needs at least one step")
        if self.lr < 0:
            raise ConfigError("adaptation learning rate must be non-negative")
        if self.max_patches < 1:
            raise ConfigError("max_patches must be >= 1")

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(patch_size=self.patch_size, overlap=self.patch_overlap)


@dataclass
class AdaptResult:
    theta: ParamSet
    trace: list[float]
    failed: bool = False


def _to_tensor(arr) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)


def _adapt_offsets(
    mask: np.ndarray, spec: PatchSpec, max_patches: int
) -> list[tuple[int, int, int]]:
    """Offsets of the lesion-densest patches; a central patch when empty."""
    offsets = patch_grid(mask.shape, spec)
    weighted = [
        (int(crop_patch(mask, o, spec.patch_size).sum()), o) for o in offsets
    ]
    with_lesion = sorted((w for w in weighted if w[0] > 0), key=lambda w: -w[0])
    if with_lesion:
        return [o for _, o in with_lesion[:max_patches]]
    center = tuple((d - spec.patch_size) // 2 for d in mask.shape)
    return [center]


def adapt(
    model: JointSegModel,
    x_t1: np.ndarray,
    lesion_mask: np.ndarray,
    sup: tuple[np.ndarray, np.ndarray],
    fill_value: float,
    cfg: AdaptConfig,
    theta: ParamSet | None = None,
) -> AdaptResult:
    """Adapt the T1 extractor to one subject.

    Runs up to ``cfg.steps`` Adam steps on the adaptation loss over the
    lesion-densest patches with the given constant fill. The trace holds
    the loss at the parameters before each step plus one final value, so
    ``trace[-1] < trace[0]`` means the adaptation descended. The input
    parameters are cloned; on a non-finite loss the original set is
    returned with the failure flag raised. Normalization layers run with
    their fixed statistics throughout.
    """
    if x_t1.shape != lesion_mask.shape:
        raise InputError("image and lesion mask shapes differ")
    was_training = model.training
    model.eval()
    base = theta if theta is not None else model.theta()
    tensors = [(n, t.detach().clone().requires_grad_(True)) for n, t in base.items()]
    params = ParamSet(tensors)
    opt = torch.optim.Adam([t for _, t in tensors], lr=cfg.lr)

    spec = cfg.patch_spec
    x_pad, _ = pad_to_patch(np.asarray(x_t1, dtype=np.float32), spec)
    m_pad, _ = pad_to_patch(np.asarray(lesion_mask, dtype=np.float32), spec)
    offsets = _adapt_offsets(m_pad, spec, cfg.max_patches)
    p = spec.patch_size
    xs = _stack_patches(x_pad, offsets, p)
    ms = _stack_patches(m_pad, offsets, p)
    x_tilde = compose_fill(xs, ms, float(fill_value))

    sup_x = np.asarray(sup[0], dtype=np.float32)
    sup_off = tuple((d - p) // 2 for d in sup_x.shape)
    x_sup = _to_tensor(crop_patch(sup_x, sup_off, p))[None, None]
    y_sup = torch.as_tensor(
        np.ascontiguousarray(crop_patch(np.asarray(sup[1]), sup_off, p))
    )[None].long()

    def loss_at(ps):
        return inner_loss(model, x_sup, y_sup, xs, ms, x_tilde=x_tilde, theta=ps)

    trace: list[float] = []
    best = float("inf")
    since_best = 0
    for _ in range(cfg.steps):
        lv = loss_at(params)
        if not torch.isfinite(lv.value):
            if was_training:
                model.train()
            return AdaptResult(theta=base.clone(), trace=trace, failed=True)
        opt.zero_grad()
        lv.value.backward()
        opt.step()
        trace.append(float(lv.value.detach()))
        if trace[-1] < best - 1e-6:
            best = trace[-1]
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    with torch.no_grad():
        final = loss_at(params.detach())
    trace.append(float(final.value))
    if was_training:
        model.train()
    return AdaptResult(theta=params.detach(), trace=trace, failed=False)


def _stack_patches(padded: np.ndarray, offsets, p: int) -> torch.Tensor:
    return torch.stack(
        [_to_tensor(crop_patch(padded, off, p)) for off in offsets]
    ).unsqueeze(1)


def _predict_patchwise(forward, shape, spec: PatchSpec, channels: int) -> np.ndarray:
    offsets = patch_grid(shape, spec)
    p = spec.patch_size
    patches = []
    for off in offsets:
        probs = forward(off)
        patches.append(probs.detach().cpu().numpy()[0])
    return reassemble(patches, offsets, spec, shape)


def predict_anatomy_volume(model, x_t1, spec: PatchSpec, theta: ParamSet | None = None):
    """Anatomy-head class probabilities over a full volume."""
    model.eval()
    x_pad, pad = pad_to_patch(np.asarray(x_t1, dtype=np.float32), spec)
    with torch.no_grad():
        out = _predict_patchwise(
            lambda off: model.predict_anatomy(
                model.forward_t1(
                    _to_tensor(crop_patch(x_pad, off, spec.patch_size))[None, None],
                    theta=theta,
                )
            ),
            x_pad.shape,
            spec,
            len(ANATOMY_CLASS_IDS),
        )
    s = x_t1.shape
    return out[:, : s[0], : s[1], : s[2]]


def predict_lesion_volume(model, x_flair, spec: PatchSpec):
    model.eval()
    x_pad, _ = pad_to_patch(np.asarray(x_flair, dtype=np.float32), spec)
    with torch.no_grad():
        out = _predict_patchwise(
            lambda off: model.predict_lesion(
                model.forward_flair(
                    _to_tensor(crop_patch(x_pad, off, spec.patch_size))[None, None]
                )
            ),
            x_pad.shape,
            spec,
            2,
        )
    s = x_flair.shape
    return out[:, : s[0], : s[1], : s[2]]


def predict_joint_volume(model, x_t1, x_flair, spec: PatchSpec, theta: ParamSet | None = None):
    if x_t1.shape != x_flair.shape:
        raise InputError("T1 and FLAIR shapes differ")
    model.eval()
    t_pad, _ = pad_to_patch(np.asarray(x_t1, dtype=np.float32), spec)
    f_pad, _ = pad_to_patch(np.asarray(x_flair, dtype=np.float32), spec)

    def forward(off):
        xt = _to_tensor(crop_patch(t_pad, off, spec.patch_size))[None, None]
        xf = _to_tensor(crop_patch(f_pad, off, spec.patch_size))[None, None]
        w_t1 = model.forward_t1(xt, theta=theta)
        w_f = model.forward_flair(xf)
        return model.fuse(w_t1, w_f)

    with torch.no_grad():
        out = _predict_patchwise(forward, t_pad.shape, spec, NUM_CLASSES)
    s = x_t1.shape
    return out[:, : s[0], : s[1], : s[2]]


def anatomy_ids_from_probs(probs: np.ndarray) -> np.ndarray:
    """Map anatomy-head argmax channels back to full-space class ids."""
    return _ANATOMY_IDS[np.argmax(probs, axis=0)]


@dataclass
class InferenceResult:
    y_joint: LabelMap
    y_anatomy: LabelMap
    y_lesion: LesionMask
    trace: list[float]
    fill_value: float


def infer_single(
    model: JointSegModel,
    x_t1: np.ndarray,
    x_flair: np.ndarray,
    sup: tuple[np.ndarray, np.ndarray],
    fill_value: float,
    cfg: AdaptConfig,
    lesion_mask_override: np.ndarray | None = None,
) -> InferenceResult:
    """Full single-model inference for one subject.

    Predicts the lesion mask from FLAIR, adapts the T1 extractor with that
    mask (or an override, e.g. a ground-truth mask in study protocols),
    then emits the anatomy and fused joint segmentations with the adapted
    parameters.
    """
    if x_flair is None:
        raise InputError("inference requires a FLAIR volume")
    spec = cfg.patch_spec
    lesion_probs = predict_lesion_volume(model, x_flair, spec)
    y_lesion = (np.argmax(lesion_probs, axis=0) == 1).astype(np.uint8)
    mask = lesion_mask_override if lesion_mask_override is not None else y_lesion

    result = adapt(model, x_t1, mask, sup, fill_value, cfg)
    if result.failed:
        raise JointsegError("adaptation diverged to a non-finite loss")

    anat_probs = predict_anatomy_volume(model, x_t1, spec, theta=result.theta)
    y_anat = anatomy_ids_from_probs(anat_probs)
    joint_probs = predict_joint_volume(model, x_t1, x_flair, spec, theta=result.theta)
    y_joint = np.argmax(joint_probs, axis=0).astype(np.uint8)
    return InferenceResult(
        y_joint=LabelMap(data=y_joint),
        y_anatomy=LabelMap(data=y_anat),
        y_lesion=LesionMask(data=y_lesion),
        trace=result.trace,
        fill_value=float(fill_value),
    )


@dataclass(frozen=True)
class EnsembleSpec:
    """Fold checkpoints crossed with fill values; one member per pair."""

    checkpoints: tuple[str, ...]
    fill_values: tuple[float, ...] = (-5.0, -2.0, -1.0, 1.0, 2.0, 5.0)
    vote: str = "majority"

    def __post_init__(self):
        if not self.checkpoints or not self.fill_values:
            raise ConfigError("ensemble needs at least one checkpoint and one fill")
        if self.vote != "majority":
            raise ConfigError(f"unsupported vote rule {self.vote!r}")

    def member_plan(self) -> list[tuple[str, float]]:
        return list(itertools.product(self.checkpoints, self.fill_values))

    @property
    def total_members(self) -> int:
        return len(self.checkpoints) * len(self.fill_values)


@dataclass
class EnsembleResult:
    y_joint: LabelMap
    y_anatomy: LabelMap
    members: list[InferenceResult]
    member_ids: list[str]


def infer_ensemble(
    spec: EnsembleSpec,
    x_t1: np.ndarray,
    x_flair: np.ndarray,
    sup: tuple[np.ndarray, np.ndarray],
    cfg: AdaptConfig,
    out_dir=None,
    subject_id: str = "subject",
) -> EnsembleResult:
    """Majority vote over folds x fills; both the joint and the anatomy
    maps are ensembled. Members that fail are dropped as long as at least
    half survive; per-member predictions are persisted when ``out_dir``
    is given."""
    models: dict[str, JointSegModel] = {}
    members: list[InferenceResult] = []
    member_ids: list[str] = []
    failures = []
    for ckpt, fill in spec.member_plan():
        try:
            if ckpt not in models:
                models[ckpt] = load_checkpoint(ckpt)[0]
            res = infer_single(models[ckpt], x_t1, x_flair, sup, fill, cfg)
            members.append(res)
            member_ids.append(f"{os.path.basename(str(ckpt))}|fill={fill:g}")
        except JointsegError as exc:
            failures.append(f"{ckpt} fill={fill}: {exc}")
    if len(members) * 2 < spec.total_members:
        raise JointsegError(
            f"ensemble failed: only {len(members)}/{spec.total_members} members "
            f"survived ({'; '.join(failures)})"
        )
    y_joint = majority_vote([m.y_joint for m in members])
    y_anat = majority_vote([m.y_anatomy for m in members])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for mid, m in zip(member_ids, members):
            safe = mid.replace("|", "_").replace("=", "")
            np.savez_compressed(
                os.path.join(out_dir, f"{subject_id}_{safe}.npz"),
                y_joint=m.y_joint.data,
                y_anatomy=m.y_anatomy.data,
                y_lesion=m.y_lesion.data,
                trace=np.asarray(m.trace, dtype=np.float32),
            )
    return EnsembleResult(
        y_joint=y_joint, y_anatomy=y_anat, members=members, member_ids=member_ids
    )
