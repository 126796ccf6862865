"""Dense 3D data model: volumes, label maps, lesion masks and patching.

Array layout is ``(x, y, z)`` with voxel spacing in millimetres. All
operations here are pure: they never mutate their inputs and are safe to
call concurrently on distinct volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DegenerateInputError, InputError, ShapeError
from .labels import NUM_CLASSES

Triple = tuple[float, float, float]


@dataclass
class Volume:
    """A dense scalar field of one imaging sequence.

    Attributes:
        data: 3D float array of intensities.
        spacing: voxel size (sx, sy, sz) in mm, all positive.
        origin: world position of voxel (0, 0, 0) in mm.
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got {self.data.ndim}D")
        if min(self.data.shape) < 1:
            raise ShapeError("all volume dimensions must be >= 1")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data=data, spacing=self.spacing, origin=self.origin)


@dataclass
class LabelMap:
    """Dense integer class field over the same grid as its paired Volume."""

    data: np.ndarray
    class_count: int = NUM_CLASSES

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"label data must be 3D, got {self.data.ndim}D")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InputError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size:
            lo, hi = int(self.data.min()), int(self.data.max())
            if lo < 0 or hi >= self.class_count:
                raise InputError(
                    f"label values [{lo}, {hi}] outside [0, {self.class_count})"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LesionMask:
    """Binary lesion indicator; its complement partitions the volume."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"mask data must be 3D, got {self.data.ndim}D")
        vals = np.unique(self.data)
        if not np.isin(vals, (0, 1)).all():
            raise InputError("lesion mask must be binary")
        self.data = self.data.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def complement(self) -> np.ndarray:
        """The healthy-region indicator; together they tile the grid."""
        return (1 - self.data).astype(np.uint8)


@dataclass(frozen=True)
class PatchSpec:
    """Regular patch grid with overlap and mean blending."""

    patch_size: int = 32
    overlap: int = 8
    blend: str = "average"

    def __post_init__(self):
        if not 0 <= self.overlap < self.patch_size:
            raise InputError(
                f"overlap must satisfy 0 <= overlap < patch_size, got "
                f"{self.overlap} vs {self.patch_size}"
            )
        if self.blend != "average":
            raise InputError(f"unsupported blend mode {self.blend!r}")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap


def zscore_normalize(v: Volume, mask: np.ndarray | None = None) -> Volume:
    """Normalize intensities to zero mean and unit variance.

    Statistics are computed over ``mask`` foreground when given, otherwise
    over the whole volume; the affine transform is applied everywhere.
    """
    data = np.asarray(v.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise InputError("volume contains non-finite values")
    if mask is not None:
        sel = np.asarray(mask).astype(bool)
        if sel.shape != data.shape:
            raise ShapeError("mask shape does not match volume shape")
        if sel.sum() < 2:
            raise DegenerateInputError("mask selects fewer than 2 voxels")
        sample = data[sel]
    else:
        sample = data.reshape(-1)
    mean = sample.mean()
    std = sample.std()
    if std < 1e-12:
        raise DegenerateInputError("zero intensity variance")
    return v.with_data(((data - mean) / std).astype(np.float32))


def _axis_offsets(dim: int, patch: int, stride: int) -> list[int]:
    offs = list(range(0, dim - patch + 1, stride))
    if offs[-1] != dim - patch:
        offs.append(dim - patch)
    return offs


def patch_grid(shape: tuple[int, int, int], spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Placement offsets covering ``shape``; the last patch per axis is
    clamped to the boundary, which may locally increase overlap."""
    if min(shape) < spec.patch_size:
        raise InputError(
            f"shape {shape} smaller than patch size {spec.patch_size}; "
            "pad the volume first"
        )
    per_axis = [_axis_offsets(d, spec.patch_size, spec.stride) for d in shape]
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def pad_to_patch(data: np.ndarray, spec: PatchSpec) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Zero-pad trailing edges so every dimension reaches the patch size.

    Returns the padded array and the per-axis pad amounts (for cropping
    reassembled output back to the original shape).
    """
    pad = tuple(max(0, spec.patch_size - d) for d in data.shape)
    if any(pad):
        data = np.pad(data, [(0, p) for p in pad])
    return data, pad


def extract_patches(
    v: Volume, spec: PatchSpec
) -> tuple[list[np.ndarray], list[tuple[int, int, int]], tuple[int, int, int]]:
    """Split a volume into overlapping cubic patches.

    Returns (patches, offsets, pad); offsets are positions in the padded
    grid, and ``pad`` records the zero padding applied to small volumes.
    """
    data, pad = pad_to_patch(np.asarray(v.data), spec)
    offsets = patch_grid(data.shape, spec)
    p = spec.patch_size
    patches = [data[i : i + p, j : j + p, k : k + p].copy() for i, j, k in offsets]
    return patches, offsets, pad


def reassemble(
    patches: list[np.ndarray],
    offsets: list[tuple[int, int, int]],
    spec: PatchSpec,
    out_shape: tuple[int, int, int],
) -> np.ndarray:
    """Blend per-patch class-probability fields back into a full volume.

    Each patch is ``(C, p, p, p)``; every voxel of the output is the
    arithmetic mean of all covering patches, so agreement in overlaps is
    reproduced exactly and normalized inputs stay normalized.
    """
    if len(patches) != len(offsets):
        raise InputError("patches and offsets length mismatch")
    if not patches:
        raise CoverageError("no patches given")
    channels = patches[0].shape[0]
    p = spec.patch_size
    grid_shape = tuple(
        max(d, max(o[a] for o in offsets) + p) for a, d in enumerate(out_shape)
    )
    acc = np.zeros((channels,) + grid_shape, dtype=np.float64)
    cov = np.zeros(grid_shape, dtype=np.int32)
    for patch, (i, j, k) in zip(patches, offsets):
        if patch.shape != (channels, p, p, p):
            raise InputError(f"patch shape {patch.shape} != {(channels, p, p, p)}")
        acc[:, i : i + p, j : j + p, k : k + p] += patch
        cov[i : i + p, j : j + p, k : k + p] += 1
    core = cov[: out_shape[0], : out_shape[1], : out_shape[2]]
    if (core == 0).any():
        raise CoverageError("patch placements leave uncovered voxels")
    out = acc[:, : out_shape[0], : out_shape[1], : out_shape[2]] / core
    return out.astype(np.float32)


def crop_patch(arr: np.ndarray, offset: tuple[int, int, int], size: int) -> np.ndarray:
    i, j, k = offset
    return arr[..., i : i + size, j : j + size, k : k + size]


def one_hot(y: LabelMap, class_count: int | None = None) -> np.ndarray:
    """Expand a label map into a ``(C, x, y, z)`` indicator field."""
    c = y.class_count if class_count is None else class_count
    if y.data.size and y.data.max() >= c:
        raise InputError(f"label {int(y.data.max())} >= class count {c}")
    out = np.zeros((c,) + y.data.shape, dtype=np.float32)
    for cls in range(c):
        out[cls] = y.data == cls
    return out
