import numpy as np
import pytest

from jointseg.errors import CoverageError, DegenerateInputError, InputError, ShapeError
from jointseg.volume import (
    LabelMap,
    LesionMask,
    PatchSpec,
    Volume,
    extract_patches,
    one_hot,
    patch_grid,
    reassemble,
    zscore_normalize,
)


def grid_oracle(dim, p, overlap):
    """Independent enumeration: stride p-overlap, last offset clamped."""
    stride = p - overlap
    offs, o = [], 0
    while o + p < dim:
        offs.append(o)
        o += stride
    offs.append(dim - p)
    return sorted(set(offs))


class TestZscore:
    def test_constant_volume_rejected(self):
        with pytest.raises(DegenerateInputError):
            zscore_normalize(Volume(data=np.ones((4, 4, 4))))

    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(6, 6, 6))
        data = (data - data.mean()) / data.std()
        out = zscore_normalize(Volume(data=data))
        assert np.abs(out.data - data).max() < 1e-6

    def test_statistics_match_direct_recomputation(self):
        rng = np.random.default_rng(1)
        v = Volume(data=rng.normal(3.0, 2.5, size=(8, 8, 8)))
        out = zscore_normalize(v)
        assert abs(out.data.mean()) < 1e-5
        assert abs(out.data.std() - 1.0) < 1e-5
        # against the closed form applied voxelwise
        expect = (v.data - v.data.mean()) / v.data.std()
        assert np.abs(out.data - expect).max() < 1e-5

    def test_masked_statistics(self):
        rng = np.random.default_rng(2)
        v = Volume(data=rng.normal(size=(8, 8, 8)))
        mask = np.zeros((8, 8, 8), dtype=np.uint8)
        mask[2:6, 2:6, 2:6] = 1
        out = zscore_normalize(v, mask=mask)
        sel = out.data[mask.astype(bool)]
        assert abs(sel.mean()) < 1e-5 and abs(sel.std() - 1.0) < 1e-5

    def test_nonfinite_rejected(self):
        data = np.ones((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(InputError):
            zscore_normalize(Volume(data=data))


class TestPatches:
    def test_exact_size_single_patch(self):
        v = Volume(data=np.arange(4**3, dtype=float).reshape(4, 4, 4))
        patches, offsets, pad = extract_patches(v, PatchSpec(patch_size=4, overlap=2))
        assert offsets == [(0, 0, 0)] and pad == (0, 0, 0)
        assert (patches[0] == v.data).all()

    @pytest.mark.parametrize("dim,p,ov,expect", [(40, 32, 20, [0, 8]), (33, 32, 20, [0, 1])])
    def test_grid_matches_oracle(self, dim, p, ov, expect):
        offs = patch_grid((dim, dim, dim), PatchSpec(patch_size=p, overlap=ov))
        per_axis = sorted({o[0] for o in offs})
        assert per_axis == expect == grid_oracle(dim, p, ov)
        assert len(offs) == len(expect) ** 3

    def test_full_coverage_property(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            dim = int(rng.integers(8, 40))
            p = int(rng.integers(4, min(dim, 16) + 1))
            ov = int(rng.integers(0, p))
            spec = PatchSpec(patch_size=p, overlap=ov)
            cov = np.zeros((dim, dim, dim), dtype=int)
            for i, j, k in patch_grid((dim, dim, dim), spec):
                cov[i : i + p, j : j + p, k : k + p] += 1
            assert (cov >= 1).all()

    def test_small_volume_padded(self):
        v = Volume(data=np.ones((3, 8, 8)))
        patches, offsets, pad = extract_patches(v, PatchSpec(patch_size=8, overlap=0))
        assert pad == (5, 0, 0)
        assert patches[0].shape == (8, 8, 8)
        assert (patches[0][3:, :, :] == 0).all()

    def test_overlap_validation(self):
        with pytest.raises(InputError):
            PatchSpec(patch_size=8, overlap=8)


class TestReassemble:
    def test_single_patch_identity(self):
        rng = np.random.default_rng(0)
        patch = rng.random((3, 4, 4, 4)).astype(np.float32)
        patch /= patch.sum(axis=0, keepdims=True)
        out = reassemble([patch], [(0, 0, 0)], PatchSpec(patch_size=4, overlap=0), (4, 4, 4))
        assert np.abs(out - patch).max() < 1e-6

    def test_agreeing_patches_reproduce_value(self):
        patch = np.full((2, 4, 4, 4), 0.5, dtype=np.float32)
        spec = PatchSpec(patch_size=4, overlap=2)
        out = reassemble([patch, patch], [(0, 0, 0), (2, 0, 0)], spec, (6, 4, 4))
        assert np.abs(out - 0.5).max() < 1e-6

    def test_overlap_mean_hand_computed(self):
        spec = PatchSpec(patch_size=2, overlap=1)
        a = np.zeros((2, 2, 2, 2), dtype=np.float32)
        b = np.zeros((2, 2, 2, 2), dtype=np.float32)
        a[:, :, :, :] = np.array([0.8, 0.2])[:, None, None, None]
        b[:, :, :, :] = np.array([0.4, 0.6])[:, None, None, None]
        out = reassemble([a, b], [(0, 0, 0), (1, 0, 0)], spec, (3, 2, 2))
        # voxel x=1 is covered by both: mean of (0.8,0.2) and (0.4,0.6)
        assert np.allclose(out[:, 1, 0, 0], [(0.8 + 0.4) / 2, (0.2 + 0.6) / 2])
        assert np.allclose(out[:, 0, 0, 0], [0.8, 0.2])

    def test_probability_sum_preserved(self):
        rng = np.random.default_rng(3)
        spec = PatchSpec(patch_size=4, overlap=2)
        offsets = patch_grid((6, 6, 6), spec)
        patches = []
        for _ in offsets:
            p = rng.random((5, 4, 4, 4)).astype(np.float32)
            patches.append(p / p.sum(axis=0, keepdims=True))
        out = reassemble(patches, offsets, spec, (6, 6, 6))
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-5

    def test_uncovered_voxel_raises(self):
        patch = np.ones((1, 2, 2, 2), dtype=np.float32)
        with pytest.raises(CoverageError):
            reassemble([patch], [(0, 0, 0)], PatchSpec(patch_size=2, overlap=0), (4, 4, 4))

    def test_blend_independence_with_constant_predictor(self):
        # reassemble(extract_patches(v)) with a constant per-patch output
        spec = PatchSpec(patch_size=4, overlap=3)
        offsets = patch_grid((9, 9, 9), spec)
        const = np.array([0.25, 0.75], dtype=np.float32)[:, None, None, None]
        patches = [np.broadcast_to(const, (2, 4, 4, 4)).copy() for _ in offsets]
        out = reassemble(patches, offsets, spec, (9, 9, 9))
        assert np.abs(out - const).max() < 1e-6


class TestOneHot:
    def test_argmax_round_trip(self):
        rng = np.random.default_rng(4)
        y = LabelMap(data=rng.integers(0, 8, size=(5, 5, 5)).astype(np.int16))
        oh = one_hot(y)
        assert (oh.argmax(axis=0) == y.data).all()

    def test_two_class_single_voxel(self):
        y = LabelMap(data=np.array([[[1]]], dtype=np.int16), class_count=2)
        assert one_hot(y).tolist() == [[[[0.0]]], [[[1.0]]]]

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        y = LabelMap(data=rng.integers(0, 8, size=(4, 4, 4)).astype(np.int16))
        oh = one_hot(y)
        for c in range(8):
            for idx in np.ndindex(4, 4, 4):
                assert oh[(c,) + idx] == (1.0 if y.data[idx] == c else 0.0)

    def test_exactly_one_channel_set(self):
        rng = np.random.default_rng(6)
        y = LabelMap(data=rng.integers(0, 8, size=(6, 6, 6)).astype(np.int16))
        assert (one_hot(y).sum(axis=0) == 1).all()

    def test_label_out_of_range(self):
        y = LabelMap(data=np.full((2, 2, 2), 3, dtype=np.int16), class_count=8)
        with pytest.raises(InputError):
            one_hot(y, class_count=2)


class TestTypes:
    def test_mask_invariants(self):
        m = LesionMask(data=np.array([[[0, 1]]], dtype=np.uint8))
        a = m.complement()
        assert ((a + m.data) == 1).all() and ((a * m.data) == 0).all()

    def test_mask_rejects_nonbinary(self):
        with pytest.raises(InputError):
            LesionMask(data=np.array([[[2]]]))

    def test_labelmap_range_checked(self):
        with pytest.raises(InputError):
            LabelMap(data=np.array([[[9]]], dtype=np.int16))

    def test_volume_validation(self):
        with pytest.raises(ShapeError):
            Volume(data=np.zeros((2, 2)))
        with pytest.raises(InputError):
            Volume(data=np.zeros((2, 2, 2)), spacing=(0, 1, 1))
