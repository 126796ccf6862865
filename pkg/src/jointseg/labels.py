"""Target label space and label-map reduction.

The segmentation currency is an 8-class label space: seven healthy-tissue
classes (background included) plus one lesion class. Raw label maps with
arbitrary integer ids (e.g. Freesurfer outputs) are reduced to this space
through a ``MappingTable``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

BACKGROUND = 0
GRAY_MATTER = 1
BASAL_GANGLIA = 2
WHITE_MATTER = 3
LESION = 4
VENTRICLES = 5
CEREBELLUM = 6
BRAIN_STEM = 7

NUM_CLASSES = 8

CLASS_NAMES = {
    BACKGROUND: "background",
    GRAY_MATTER: "gray_matter",
    BASAL_GANGLIA: "basal_ganglia",
    WHITE_MATTER: "white_matter",
    LESION: "lesion",
    VENTRICLES: "ventricles",
    CEREBELLUM: "cerebellum",
    BRAIN_STEM: "brain_stem",
}

# Healthy-structure ids in ascending order; the anatomy head emits one
# channel per entry (channel index != class id because the lesion id sits
# in the middle of the range).
ANATOMY_CLASS_IDS = (
    BACKGROUND,
    GRAY_MATTER,
    BASAL_GANGLIA,
    WHITE_MATTER,
    VENTRICLES,
    CEREBELLUM,
    BRAIN_STEM,
)
NUM_ANATOMY_CLASSES = len(ANATOMY_CLASS_IDS)

# Display palette (RGB in [0,1]): red gray matter, blue white matter,
# cyan ventricles, green basal ganglia, white brain stem, magenta
# cerebellum; black background and yellow lesion complete the set.
CLASS_COLORS = {
    BACKGROUND: (0.0, 0.0, 0.0),
    GRAY_MATTER: (0.9, 0.1, 0.1),
    BASAL_GANGLIA: (0.1, 0.8, 0.2),
    WHITE_MATTER: (0.15, 0.25, 0.9),
    LESION: (0.95, 0.85, 0.1),
    VENTRICLES: (0.1, 0.85, 0.9),
    CEREBELLUM: (0.85, 0.15, 0.85),
    BRAIN_STEM: (1.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class MappingTable:
    """Total map from raw integer ids to target classes.

    Ids absent from ``entries`` map to ``default_class``, which makes the
    table total over the non-negative integers.
    """

    entries: dict[int, int] = field(default_factory=dict)
    default_class: int = GRAY_MATTER

    def __post_init__(self):
        targets = set(self.entries.values()) | {self.default_class}
        bad = [t for t in targets if not 0 <= t < NUM_CLASSES]
        if bad:
            raise InputError(f"mapping targets outside 0..{NUM_CLASSES - 1}: {bad}")

    def lookup(self, raw_id: int) -> int:
        if raw_id < 0:
            raise InputError(f"negative label id {raw_id}")
        return self.entries.get(int(raw_id), self.default_class)


def _table_from_groups(groups: dict[int, list[int]], default_class: int) -> MappingTable:
    entries: dict[int, int] = {}
    for target, ids in groups.items():
        for raw in ids:
            entries[raw] = target
    return MappingTable(entries=entries, default_class=default_class)


# Freesurfer id reduction; unlisted ids fall through to cortical gray matter.
FREESURFER_TABLE = _table_from_groups(
    {
        BACKGROUND: [0, 1, 24, 6, 40, 45, 15],
        WHITE_MATTER: [2, 41, 251, 252, 253, 254, 255, 30, 62, 77],
        BASAL_GANGLIA: [9, 10, 11, 12, 13, 17, 18, 26, 48, 49, 50, 51, 52, 53, 54, 58],
        LESION: [25, 57],
        VENTRICLES: [4, 5, 14, 43, 44, 72, 31, 63],
        CEREBELLUM: [7, 8, 46, 47],
        BRAIN_STEM: [16, 28, 60],
    },
    default_class=GRAY_MATTER,
)


def identity_table() -> MappingTable:
    """Table that keeps the reduced ids 0..7 fixed (useful for idempotence checks)."""
    return MappingTable(entries={c: c for c in range(NUM_CLASSES)}, default_class=GRAY_MATTER)


def remap_labels(raw: np.ndarray, table: MappingTable) -> np.ndarray:
    """Map every voxel of ``raw`` through ``table``.

    Returns an array of target class ids with the same shape as ``raw``.
    """
    raw = np.asarray(raw)
    if raw.size and raw.min() < 0:
        raise InputError("label map contains negative ids")
    out = np.full(raw.shape, table.default_class, dtype=np.uint8)
    for raw_id in np.unique(raw):
        out[raw == raw_id] = table.lookup(int(raw_id))
    return out
