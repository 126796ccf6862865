"""Synthetic 3D phantom generation with disparate labels.

Two generators stand in for the real training corpora: lesion-free
anatomy phantoms (T1-like image + full anatomy labels) and lesioned
phantoms (T1-like + FLAIR-like images + lesion mask, with the anatomy
under the lesion recorded separately for evaluation only). Geometry is
nested ellipsoids and blobs, so every label is analytically checkable;
intensities are drawn per class around configured means, already in
z-score range.

All generators are pure functions of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import labels as L
from .errors import ConfigError, InputError
from .seeds import substream_rng
from .volume import LabelMap, LesionMask, Volume

# Class pairs that share a border in the painted geometry; their T1 means
# must stay separable relative to the noise floor.
_ADJACENT = [
    (L.BACKGROUND, L.GRAY_MATTER),
    (L.GRAY_MATTER, L.WHITE_MATTER),
    (L.WHITE_MATTER, L.VENTRICLES),
    (L.WHITE_MATTER, L.BASAL_GANGLIA),
    (L.GRAY_MATTER, L.CEREBELLUM),
    (L.WHITE_MATTER, L.CEREBELLUM),
    (L.BACKGROUND, L.CEREBELLUM),
    (L.BACKGROUND, L.BRAIN_STEM),
    (L.GRAY_MATTER, L.BRAIN_STEM),
    (L.BRAIN_STEM, L.CEREBELLUM),
]


@dataclass(frozen=True)
class RandomFillSpec:
    """Finite set of constants used to randomize lesion content.

    The default set follows the masking-augmentation constants
    {-5, -2, -1, 1, 2, 5}; a drawn fill is constant across the image.
    """

    fill_values: tuple[float, ...] = (-5.0, -2.0, -1.0, 1.0, 2.0, 5.0)

    def __post_init__(self):
        if len(self.fill_values) == 0:
            raise ConfigError("fill value set must be non-empty")
        if not all(np.isfinite(self.fill_values)):
            raise ConfigError("fill values must be finite")

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.fill_values[int(rng.integers(len(self.fill_values)))])


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity model for phantom generation.

    Geometry is expressed in normalized coordinates (each axis spans
    [-1, 1]); lesion radii likewise. Intensity means are chosen so that
    adjacent structures stay >= 2 noise standard deviations apart, which
    keeps the segmentation task learnable at desk scale.
    """

    grid_size: int = 48
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    t1_means: dict[int, float] = field(
        default_factory=lambda: {
            L.BACKGROUND: -1.2,
            L.GRAY_MATTER: -0.2,
            L.BASAL_GANGLIA: 0.9,
            L.WHITE_MATTER: 0.45,
            L.VENTRICLES: -0.8,
            L.CEREBELLUM: 0.15,
            L.BRAIN_STEM: 1.6,
        }
    )
    flair_means: dict[int, float] = field(
        default_factory=lambda: {
            L.BACKGROUND: -1.0,
            L.GRAY_MATTER: 0.3,
            L.BASAL_GANGLIA: 0.2,
            L.WHITE_MATTER: 0.1,
            L.VENTRICLES: -0.7,
            L.CEREBELLUM: 0.25,
            L.BRAIN_STEM: 0.2,
        }
    )
    noise_std: float = 0.1
    center_jitter: float = 0.04
    axis_jitter: float = 0.08
    lesion_blob_count: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (0.16, 0.30)
    lesion_center_spread: float = 0.10
    # Lesion T1 content is a coherent two-mode structure: a core drawn
    # around the background mode inside a rim drawn around the gray-matter
    # mode, so a tissue model trained on clean anatomy misreads it.
    lesion_t1_modes: tuple[float, float] = (-0.2, -1.2)
    lesion_t1_std: float = 0.15
    lesion_core_fraction: float = 0.55
    lesion_flair_mean: float = 2.5
    lesion_flair_margin: float = 1.0
    lesion_voxel_bounds: tuple[int, int] = (150, 16000)

    def __post_init__(self):
        if self.grid_size < 24:
            raise ConfigError(f"grid_size must be >= 24, got {self.grid_size}")
        for a, b in _ADJACENT:
            gap = abs(self.t1_means[a] - self.t1_means[b])
            if gap < 2 * self.noise_std:
                raise ConfigError(
                    f"T1 means of adjacent classes {L.CLASS_NAMES[a]}/"
                    f"{L.CLASS_NAMES[b]} differ by {gap:.3f} < 2*noise_std"
                )
        lo, hi = self.lesion_voxel_bounds
        if not 0 < lo <= hi:
            raise ConfigError("lesion_voxel_bounds must satisfy 0 < lo <= hi")


@dataclass
class PseudoLesionSample:
    """A lesion-free image with a real lesion's voxels pasted in.

    ``y_p`` equals the lesion class inside the mask and ``hidden_y_a``
    elsewhere; the hidden map is the evaluation target under the lesion.
    """

    x_p: Volume
    y_p: LabelMap
    y_l: LesionMask
    hidden_y_a: LabelMap
    source_anatomy_id: str = ""
    source_lesion_id: str = ""


def _coords(n: int):
    ax = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _ellipsoid(coords, center, axes) -> np.ndarray:
    x, y, z = coords
    cx, cy, cz = center
    ax, ay, az = axes
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0


def _jitter(rng, center, axes, cfg: PhantomConfig):
    c = np.asarray(center) + rng.uniform(-cfg.center_jitter, cfg.center_jitter, 3)
    a = np.asarray(axes) * rng.uniform(1 - cfg.axis_jitter, 1 + cfg.axis_jitter, 3)
    return c, a


def _paint_anatomy(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    coords = _coords(cfg.grid_size)
    lab = np.zeros((cfg.grid_size,) * 3, dtype=np.uint8)

    c, a = _jitter(rng, (0.0, 0.0, 0.05), (0.80, 0.84, 0.78), cfg)
    head = _ellipsoid(coords, c, a)
    lab[head] = L.GRAY_MATTER

    c, a = _jitter(rng, (0.0, -0.05, 0.16), (0.52, 0.54, 0.42), cfg)
    lab[_ellipsoid(coords, c, a) & head] = L.WHITE_MATTER

    for side in (-1.0, 1.0):
        c, a = _jitter(rng, (side * 0.16, 0.02, 0.18), (0.11, 0.20, 0.13), cfg)
        lab[_ellipsoid(coords, c, a) & head] = L.VENTRICLES
    for side in (-1.0, 1.0):
        c, a = _jitter(rng, (side * 0.33, -0.02, 0.10), (0.13, 0.13, 0.13), cfg)
        lab[_ellipsoid(coords, c, a) & head] = L.BASAL_GANGLIA

    c, a = _jitter(rng, (0.0, 0.42, -0.52), (0.27, 0.27, 0.27), cfg)
    lab[_ellipsoid(coords, c, a)] = L.CEREBELLUM

    x, y, z = coords
    c, a = _jitter(rng, (0.0, -0.02, -0.55), (0.13, 0.13, 0.28), cfg)
    stem = (((x - c[0]) / a[0]) ** 2 + ((y - c[1]) / a[1]) ** 2 <= 1.0) & (
        np.abs(z - c[2]) <= a[2]
    )
    lab[stem] = L.BRAIN_STEM

    present = set(np.unique(lab).tolist())
    missing = [c for c in L.ANATOMY_CLASS_IDS if c not in present]
    if missing:
        raise ConfigError(
            f"geometry infeasible at grid {cfg.grid_size}: missing classes "
            f"{[L.CLASS_NAMES[c] for c in missing]}"
        )
    return lab


def _render(lab: np.ndarray, means: dict[int, float], std: float, rng) -> np.ndarray:
    img = rng.normal(0.0, std, lab.shape)
    for cls, mean in means.items():
        img[lab == cls] += mean
    return img.astype(np.float32)


def generate_anatomy_phantom(cfg: PhantomConfig, seed: int) -> tuple[Volume, LabelMap]:
    """Lesion-free phantom: T1-like volume plus full anatomy labels."""
    geom = substream_rng(seed, "geometry")
    noise = substream_rng(seed, "t1-noise")
    lab = _paint_anatomy(cfg, geom)
    t1 = _render(lab, cfg.t1_means, cfg.noise_std, noise)
    return Volume(data=t1, spacing=cfg.spacing), LabelMap(data=lab)


def _sample_lesion_mask(
    cfg: PhantomConfig, lab: np.ndarray, rng
) -> tuple[np.ndarray, np.ndarray]:
    """Union of overlapping spheres seeded in white matter, clipped to the
    head; also returns the core region (each sphere shrunk) for the
    two-mode content."""
    coords = _coords(cfg.grid_size)
    head = lab != L.BACKGROUND
    wm_idx = np.argwhere(lab == L.WHITE_MATTER)
    lo, hi = cfg.lesion_voxel_bounds
    for _ in range(64):
        seed_vox = wm_idx[int(rng.integers(len(wm_idx)))]
        center = (seed_vox + 0.5) / cfg.grid_size * 2.0 - 1.0
        mask = np.zeros_like(head)
        core = np.zeros_like(head)
        n_blobs = int(rng.integers(cfg.lesion_blob_count[0], cfg.lesion_blob_count[1] + 1))
        for _ in range(n_blobs):
            c = center + rng.uniform(-cfg.lesion_center_spread, cfg.lesion_center_spread, 3)
            r = rng.uniform(*cfg.lesion_radius_range)
            mask |= _ellipsoid(coords, c, (r, r, r))
            rc = r * cfg.lesion_core_fraction
            core |= _ellipsoid(coords, c, (rc, rc, rc))
        mask &= head
        core &= mask
        count = int(mask.sum())
        if lo <= count <= hi:
            return mask.astype(np.uint8), core.astype(np.uint8)
    raise ConfigError(
        f"could not sample a lesion with {lo}..{hi} voxels at grid {cfg.grid_size}"
    )


def generate_lesion_phantom(
    cfg: PhantomConfig, seed: int
) -> tuple[Volume, Volume, LesionMask, LabelMap]:
    """Lesioned phantom: T1, FLAIR, lesion mask and the hidden full anatomy.

    The lesion is hyperintense in FLAIR; in T1 its content is drawn from
    the bimodal disruptive distribution. The returned label map records
    the anatomy beneath the lesion and is reserved for evaluation.
    """
    geom = substream_rng(seed, "geometry")
    noise = substream_rng(seed, "t1-noise")
    flair_rng = substream_rng(seed, "flair-noise")
    lesion_rng = substream_rng(seed, "lesion")

    lab = _paint_anatomy(cfg, geom)
    t1 = _render(lab, cfg.t1_means, cfg.noise_std, noise)
    flair = _render(lab, cfg.flair_means, cfg.noise_std, flair_rng)

    mask, core = _sample_lesion_mask(cfg, lab, lesion_rng)
    sel = mask.astype(bool)
    n = int(sel.sum())
    rim_mode, core_mode = cfg.lesion_t1_modes
    content = np.where(
        core[sel].astype(bool),
        lesion_rng.normal(core_mode, cfg.lesion_t1_std, n),
        lesion_rng.normal(rim_mode, cfg.lesion_t1_std, n),
    )
    t1[sel] = content.astype(np.float32)
    flair[sel] = lesion_rng.normal(cfg.lesion_flair_mean, cfg.noise_std, n).astype(
        np.float32
    )

    return (
        Volume(data=t1, spacing=cfg.spacing),
        Volume(data=flair, spacing=cfg.spacing),
        LesionMask(data=mask),
        LabelMap(data=lab),
    )


def compose_pseudo_lesion(
    x_a: Volume, y_a: LabelMap, x_l_t1: Volume, y_l: LesionMask
) -> PseudoLesionSample:
    """Paste a real lesion's T1 voxels into a lesion-free image.

    Voxel selects are exact: outside the mask the output is bit-identical
    to the lesion-free input, inside it is bit-identical to the donor.
    """
    if not (x_a.shape == y_a.shape == x_l_t1.shape == y_l.shape):
        raise InputError("pseudo-lesion inputs must share one grid")
    sel = y_l.data.astype(bool)
    x_p = np.where(sel, x_l_t1.data, x_a.data)
    y_p = np.where(sel, np.uint8(L.LESION), y_a.data).astype(y_a.data.dtype)
    return PseudoLesionSample(
        x_p=x_a.with_data(x_p),
        y_p=LabelMap(data=y_p, class_count=y_a.class_count),
        y_l=LesionMask(data=y_l.data.copy()),
        hidden_y_a=LabelMap(data=y_a.data.copy(), class_count=y_a.class_count),
    )


def randomize_lesion_content(
    x: Volume, mask: LesionMask, spec: RandomFillSpec, seed
) -> tuple[Volume, float]:
    """Replace lesion-region intensities with one constant from the fill set.

    One value is drawn per call; the expectation over fills is approximated
    by resampling across calls. Returns the composed volume and the fill.
    """
    if x.shape != mask.shape:
        raise InputError("volume and mask shapes differ")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fill = spec.draw(rng)
    composed = np.where(mask.data.astype(bool), np.float32(fill), x.data)
    return x.with_data(composed), fill


def scaled_config(cfg: PhantomConfig, grid_size: int) -> PhantomConfig:
    """Derive a config for another grid size, rescaling lesion voxel bounds."""
    factor = (grid_size / cfg.grid_size) ** 3
    lo, hi = cfg.lesion_voxel_bounds
    return replace(
        cfg,
        grid_size=grid_size,
        lesion_voxel_bounds=(max(8, int(lo * factor)), max(16, int(hi * factor))),
    )
