"""Training losses: soft Dice, the adaptation (inner) loss and the meta
(outer) loss.

Tensors follow the (B, C, D, H, W) layout; label tensors are (B, D, H, W)
integer ids in the full class space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import InputError
from .networks import JointSegModel, ParamSet, anatomy_one_hot

DICE_EPS = 1e-5


@dataclass
class LossValue:
    """A loss with its per-term breakdown.

    For the soft Dice loss ``per_class`` holds the per-class terms and
    ``value`` is their mean. For composite losses (inner/outer) the
    breakdown holds the summands and ``value`` is their sum, matching the
    additive definitions of those objectives.
    """

    value: torch.Tensor
    per_class: torch.Tensor
    terms: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _promote(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.ndim == 4 else t


def soft_dice_per_class(probs, target, reduce_batch: bool = True, eps: float = DICE_EPS):
    """Per-class soft Dice loss: 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps).

    Sums run over all voxels and, when ``reduce_batch`` is set, over the
    batch dimension as well; otherwise per-sample losses are averaged.
    """
    probs, target = _promote(probs), _promote(target)
    if probs.shape != target.shape:
        raise InputError(f"probs shape {tuple(probs.shape)} != target {tuple(target.shape)}")
    spatial = tuple(range(2, probs.ndim))
    dims = (0,) + spatial if reduce_batch else spatial
    inter = (probs * target).sum(dim=dims)
    totals = probs.sum(dim=dims) + target.sum(dim=dims)
    loss = 1.0 - (2.0 * inter + eps) / (totals + eps)
    if not reduce_batch:
        loss = loss.mean(dim=0)
    return loss


def soft_dice_loss(probs, target, reduce_batch: bool = True, eps: float = DICE_EPS) -> LossValue:
    """Average soft Dice loss across classes (background included)."""
    per_class = soft_dice_per_class(probs, target, reduce_batch=reduce_batch, eps=eps)
    return LossValue(value=per_class.mean(), per_class=per_class)


def compose_fill(x, mask, fill):
    """x outside the mask, the constant fill inside; exact for binary masks."""
    return x * (1.0 - mask) + fill * mask


def consistency_dice_loss(probs, target_probs, reduce_batch: bool = True) -> LossValue:
    """Soft Dice between two prediction maps, with the target detached.

    The detached self-overlap of the target is subtracted as a baseline so
    that identical maps score exactly zero; the baseline carries no
    gradient, so optimization is unchanged by the centering.
    """
    target = target_probs.detach()
    raw = soft_dice_per_class(probs, target, reduce_batch=reduce_batch)
    floor = soft_dice_per_class(target, target, reduce_batch=reduce_batch)
    per_class = raw - floor
    return LossValue(value=per_class.mean(), per_class=per_class)


def inner_loss(
    model: JointSegModel,
    x_sup: torch.Tensor,
    y_sup: torch.Tensor,
    x_test_t1: torch.Tensor,
    mask: torch.Tensor,
    fill_spec=None,
    rng=None,
    fill_value: float | None = None,
    x_tilde: torch.Tensor | None = None,
    theta: ParamSet | None = None,
) -> LossValue:
    """Adaptation loss: lesion-content consistency plus lesion-free supervision.

    The consistency term compares anatomy predictions for the test image
    against predictions for the same image with lesion content replaced by
    a constant fill; the unrandomized branch is the (gradient-blocked)
    target. The supervision term anchors the extractor on a lesion-free
    image with known labels. The fill is ``fill_value`` when given,
    otherwise drawn from ``fill_spec`` via ``rng``.
    """
    x_test_t1 = _promote(x_test_t1)
    mask = _promote(mask)
    if mask.shape != x_test_t1.shape:
        raise InputError("mask and test image shapes differ")
    if x_tilde is None:
        if fill_value is None:
            if fill_spec is None or rng is None:
                raise InputError("need fill_value or (fill_spec, rng)")
            fill_value = fill_spec.draw(rng)
        x_tilde = compose_fill(x_test_t1, mask, float(fill_value))

    w_clean = model.forward_t1(x_test_t1, theta=theta)
    w_rand = model.forward_t1(x_tilde, theta=theta)
    p_clean = model.predict_anatomy(w_clean)
    p_rand = model.predict_anatomy(w_rand)
    consistency = consistency_dice_loss(p_rand, p_clean)

    w_sup = model.forward_t1(_promote(x_sup), theta=theta)
    p_sup = model.predict_anatomy(w_sup)
    target = anatomy_one_hot(y_sup).to(p_sup.dtype)
    supervision = soft_dice_loss(p_sup, target)

    value = consistency.value + supervision.value
    return LossValue(
        value=value,
        per_class=torch.stack([consistency.value, supervision.value]),
        terms={"consistency": consistency.value, "supervision": supervision.value},
    )


def outer_loss(
    model: JointSegModel,
    theta_adapted: ParamSet,
    x_p: torch.Tensor,
    x_tilde: torch.Tensor,
    x_a: torch.Tensor,
    y_a: torch.Tensor,
) -> LossValue:
    """Meta objective: anatomy Dice of the adapted extractor on the
    pseudo-lesioned, fill-randomized and clean images, all against the
    true anatomy labels."""
    target = anatomy_one_hot(y_a)
    terms = {}
    total = None
    for name, x in (("pseudo", x_p), ("randomized", x_tilde), ("clean", x_a)):
        probs = model.predict_anatomy(model.forward_t1(_promote(x), theta=theta_adapted))
        lv = soft_dice_loss(probs, target.to(probs.dtype))
        terms[name] = lv.value
        total = lv.value if total is None else total + lv.value
    return LossValue(
        value=total, per_class=torch.stack(list(terms.values())), terms=terms
    )
