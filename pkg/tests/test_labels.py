import numpy as np
import pytest

from jointseg.errors import InputError
from jointseg.labels import (
    FREESURFER_TABLE,
    MappingTable,
    NUM_CLASSES,
    identity_table,
    remap_labels,
)

# The reference reduction, spelled out group by group.
EXPECTED_GROUPS = {
    0: [0, 1, 24, 6, 40, 45, 15],
    3: [2, 41, 251, 252, 253, 254, 255, 30, 62, 77],
    2: [9, 10, 11, 12, 13, 17, 18, 26, 48, 49, 50, 51, 52, 53, 54, 58],
    4: [25, 57],
    5: [4, 5, 14, 43, 44, 72, 31, 63],
    6: [7, 8, 46, 47],
    7: [16, 28, 60],
}


def test_every_listed_id_maps_to_its_group():
    for target, ids in EXPECTED_GROUPS.items():
        raw = np.array(ids).reshape(1, 1, -1)
        out = remap_labels(raw, FREESURFER_TABLE)
        assert (out == target).all(), f"group {target} mismapped"


@pytest.mark.parametrize(
    "raw_id,target",
    [(2, 3), (16, 7), (1034, 1), (0, 0), (58, 2), (63, 5), (77, 3), (47, 6), (25, 4)],
)
def test_spot_mappings(raw_id, target):
    out = remap_labels(np.full((2, 2, 2), raw_id), FREESURFER_TABLE)
    assert (out == target).all()


def test_unlisted_ids_default_to_cortical_gray_matter():
    rng = np.random.default_rng(3)
    listed = set(FREESURFER_TABLE.entries)
    raw = rng.integers(256, 2000, size=(4, 4, 4))
    out = remap_labels(raw, FREESURFER_TABLE)
    unlisted = ~np.isin(raw, sorted(listed))
    assert (out[unlisted] == 1).all()


def test_negative_id_rejected():
    with pytest.raises(InputError):
        remap_labels(np.array([[[-1]]]), FREESURFER_TABLE)
    with pytest.raises(InputError):
        FREESURFER_TABLE.lookup(-5)


def test_remap_total_over_random_ids():
    rng = np.random.default_rng(11)
    raw = rng.integers(0, 3000, size=(6, 6, 6))
    out = remap_labels(raw, FREESURFER_TABLE)
    assert out.min() >= 0 and out.max() < NUM_CLASSES


def test_idempotent_on_reduced_maps():
    rng = np.random.default_rng(5)
    reduced = rng.integers(0, NUM_CLASSES, size=(5, 5, 5))
    again = remap_labels(reduced, identity_table())
    assert (again == reduced).all()


def test_mapping_table_validates_targets():
    with pytest.raises(InputError):
        MappingTable(entries={1: 9})
