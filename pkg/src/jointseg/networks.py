"""Dual-branch segmentation architecture.

A U-shaped extractor per sequence (T1 for tissue, FLAIR for lesions),
shallow per-task heads, and an attention-fusion head that gates the
FLAIR features spatially before the joint classification. Every forward
accepts an optional ``ParamSet`` override so adapted parameters can be
evaluated without mutating the stored ones.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigError, InputError, ShapeError
from .labels import ANATOMY_CLASS_IDS, NUM_ANATOMY_CLASSES, NUM_CLASSES

STAGE_TAGS = ("pretrained", "cotrained", "joint")


@dataclass(frozen=True)
class ExtractorConfig:
    """U-Net shape: filters start at ``base_filters`` and double per level."""

    levels: int = 3
    base_filters: int = 8
    input_channels: int = 1
    feature_channels: int = 16

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("extractor needs at least 2 levels")
        if min(self.base_filters, self.input_channels, self.feature_channels) < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


def paper_scale_config() -> ExtractorConfig:
    return ExtractorConfig(levels=5, base_filters=16)


class ParamSet:
    """Named, ordered parameter arrays supporting the inner gradient step.

    Arithmetic is elementwise over matching names; results are new
    ParamSets, inputs are never mutated.
    """

    def __init__(self, tensors):
        self.tensors = OrderedDict(tensors)

    @classmethod
    def from_module(cls, module: nn.Module, detach: bool = False) -> "ParamSet":
        items = [
            (n, p.detach().clone() if detach else p) for n, p in module.named_parameters()
        ]
        return cls(items)

    def _check_names(self, other: "ParamSet"):
        if list(self.tensors) != list(other.tensors):
            raise InputError("ParamSet name mismatch")

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self._check_names(other)
        return ParamSet(
            (n, a - b) for (n, a), b in zip(self.tensors.items(), other.tensors.values())
        )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self._check_names(other)
        return ParamSet(
            (n, a + b) for (n, a), b in zip(self.tensors.items(), other.tensors.values())
        )

    def __mul__(self, scalar) -> "ParamSet":
        return ParamSet((n, t * scalar) for n, t in self.tensors.items())

    __rmul__ = __mul__

    def detach(self) -> "ParamSet":
        return ParamSet((n, t.detach()) for n, t in self.tensors.items())

    def clone(self) -> "ParamSet":
        return ParamSet((n, t.detach().clone()) for n, t in self.tensors.items())

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        self._check_names(other)
        return all(
            torch.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(out_ch)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class UNetExtractor(nn.Module):
    """Contracting/expanding feature extractor; output is a feature map
    spatially aligned with the input patch."""

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        ch = [config.base_filters * 2**i for i in range(config.levels)]
        self.encoders = nn.ModuleList()
        prev = config.input_channels
        for c in ch:
            self.encoders.append(ConvBlock(prev, c))
            prev = c
        self.decoders = nn.ModuleList(
            ConvBlock(ch[i] + ch[i - 1], ch[i - 1]) for i in range(config.levels - 1, 0, -1)
        )
        self.out_conv = nn.Conv3d(ch[0], config.feature_channels, 1)

    def _forward_impl(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return self.out_conv(x)

    def forward(self, x, params: ParamSet | None = None):
        if x.ndim == 4:
            x = x.unsqueeze(0)
        if x.ndim != 5:
            raise ShapeError(f"expected (B,1,D,H,W) input, got ndim={x.ndim}")
        d = self.config.divisor
        if any(s % d for s in x.shape[2:]):
            raise ShapeError(f"patch shape {tuple(x.shape[2:])} not divisible by {d}")
        if params is None:
            return self._forward_impl(x)
        return functional_call(self, dict(params.tensors), (x,))


class SegmentationHead(nn.Module):
    """Shallow head: one 1x1x1 convolution followed by softmax."""

    def __init__(self, in_ch, num_classes):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, num_classes, 1)

    def forward(self, w, params: ParamSet | None = None):
        if params is not None:
            return functional_call(self, dict(params.tensors), (w,))
        return torch.softmax(self.conv(w), dim=1)


class FusionHead(nn.Module):
    """Attention fusion of the two branch feature maps.

    A single-channel spatial gate is computed from the concatenated
    features through three convolutions with batch norm and ReLU; the
    gated FLAIR features are added to the T1 features and classified.
    """

    def __init__(self, feature_channels, num_classes=NUM_CLASSES):
        super().__init__()
        f = feature_channels
        self.attention = nn.Sequential(
            nn.Conv3d(2 * f, f, 3, padding=1),
            nn.BatchNorm3d(f),
            nn.ReLU(inplace=True),
            nn.Conv3d(f, max(f // 2, 4), 3, padding=1),
            nn.BatchNorm3d(max(f // 2, 4)),
            nn.ReLU(inplace=True),
            nn.Conv3d(max(f // 2, 4), 1, 3, padding=1),
        )
        self.classifier = nn.Conv3d(f, num_classes, 1)

    def _forward_impl(self, w_t1, w_f):
        gate = torch.sigmoid(self.attention(torch.cat([w_t1, w_f], dim=1)))
        fused = w_t1 + gate * w_f
        return torch.softmax(self.classifier(fused), dim=1)

    def forward(self, w_t1, w_f, params: ParamSet | None = None):
        if w_t1.shape != w_f.shape:
            raise InputError(f"feature shapes differ: {w_t1.shape} vs {w_f.shape}")
        if params is None:
            return self._forward_impl(w_t1, w_f)
        return functional_call(self, dict(params.tensors), (w_t1, w_f))


class JointSegModel(nn.Module):
    """The full dual-branch model with per-task heads and fusion."""

    def __init__(self, config: ExtractorConfig | None = None):
        super().__init__()
        self.config = config or ExtractorConfig()
        self.extractor_t1 = UNetExtractor(self.config)
        self.extractor_flair = UNetExtractor(self.config)
        f = self.config.feature_channels
        self.anatomy_head = SegmentationHead(f, NUM_ANATOMY_CLASSES)
        self.lesion_head = SegmentationHead(f, 2)
        self.fusion = FusionHead(f, NUM_CLASSES)

    def forward_t1(self, x, theta: ParamSet | None = None):
        return self.extractor_t1(x, params=theta)

    def forward_flair(self, x, phi: ParamSet | None = None):
        return self.extractor_flair(x, params=phi)

    def predict_anatomy(self, w, g_a: ParamSet | None = None):
        return self.anatomy_head(w, params=g_a)

    def predict_lesion(self, w, g_l: ParamSet | None = None):
        return self.lesion_head(w, params=g_l)

    def fuse(self, w_t1, w_f, psi: ParamSet | None = None):
        return self.fusion(w_t1, w_f, params=psi)

    def theta(self, detach=False) -> ParamSet:
        return ParamSet.from_module(self.extractor_t1, detach=detach)

    def phi(self, detach=False) -> ParamSet:
        return ParamSet.from_module(self.extractor_flair, detach=detach)

    def psi(self, detach=False) -> ParamSet:
        return ParamSet.from_module(self.fusion, detach=detach)


def anatomy_channel_to_id() -> torch.Tensor:
    return torch.tensor(ANATOMY_CLASS_IDS, dtype=torch.long)


_ID_TO_CHANNEL = {cid: ch for ch, cid in enumerate(ANATOMY_CLASS_IDS)}


def compress_anatomy_labels(labels: torch.Tensor) -> torch.Tensor:
    """Map full-space anatomy ids to contiguous head channels 0..M."""
    lut = torch.full((NUM_CLASSES,), -1, dtype=torch.long)
    for cid, ch in _ID_TO_CHANNEL.items():
        lut[cid] = ch
    out = lut[labels.long()]
    if (out < 0).any():
        raise InputError("label map contains the lesion id; not a pure anatomy map")
    return out


def anatomy_one_hot(labels: torch.Tensor) -> torch.Tensor:
    """One-hot anatomy target in head-channel order, shape (B,M+1,D,H,W)."""
    comp = compress_anatomy_labels(labels)
    if comp.ndim == 3:
        comp = comp.unsqueeze(0)
    oh = F.one_hot(comp, NUM_ANATOMY_CLASSES).movedim(-1, 1)
    return oh.float()


def anatomy_probs_to_ids(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over head channels, mapped back to full-space class ids."""
    ch = probs.argmax(dim=1 if probs.ndim == 5 else 0)
    return anatomy_channel_to_id().to(probs.device)[ch]


def joint_one_hot(labels: torch.Tensor) -> torch.Tensor:
    """One-hot joint target over all classes; channel index equals class id."""
    if labels.ndim == 3:
        labels = labels.unsqueeze(0)
    return F.one_hot(labels.long(), NUM_CLASSES).movedim(-1, 1).float()


def save_checkpoint(path, stage: str, model: JointSegModel, extra: dict | None = None):
    """Self-describing checkpoint: stage tag, architecture config, named
    parameter and buffer arrays, and the torch RNG state."""
    if stage not in STAGE_TAGS:
        raise ConfigError(f"unknown stage tag {stage!r}")
    payload = {
        "stage": stage,
        "config": asdict(model.config),
        "state": model.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expect_stage: str | None = None) -> tuple[JointSegModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stage = payload.get("stage")
    if stage not in STAGE_TAGS:
        raise ConfigError(f"checkpoint {path} has unknown stage tag {stage!r}")
    if expect_stage is not None and stage != expect_stage:
        raise ConfigError(
            f"checkpoint {path} is tagged {stage!r}, expected {expect_stage!r}"
        )
    model = JointSegModel(ExtractorConfig(**payload["config"]))
    model.load_state_dict(payload["state"], strict=False)
    model.eval()
    meta = {"stage": stage, "extra": payload.get("extra", {}), "path": str(path)}
    return model, meta


def component_state(model: JointSegModel, components: tuple[str, ...]) -> dict:
    """State dict restricted to the given top-level components."""
    return OrderedDict(
        (k, v)
        for k, v in model.state_dict().items()
        if k.split(".", 1)[0] in components
    )


def state_fingerprint(state: dict) -> str:
    """Order-independent content hash of named arrays (for freeze contracts)."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        t = state[k]
        if isinstance(t, torch.Tensor):
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
