import numpy as np
import pytest

from jointseg.errors import InputError, UndefinedMetric
from jointseg.metrics import dice_score, hd95, majority_vote, paste_lesion, region_dice
from jointseg.volume import LabelMap


def brute_dice(pred, gt, cls):
    p = g = i = 0
    for idx in np.ndindex(*pred.shape):
        if pred[idx] == cls:
            p += 1
        if gt[idx] == cls:
            g += 1
        if pred[idx] == cls and gt[idx] == cls:
            i += 1
    return 1.0 if p + g == 0 else 2.0 * i / (p + g)


def brute_surface(mask):
    """Independent surface extraction: 6-neighbour check, edges count as
    background."""
    out = np.zeros_like(mask, dtype=bool)
    shape = mask.shape
    for idx in np.ndindex(*shape):
        if not mask[idx]:
            continue
        for axis in range(3):
            for d in (-1, 1):
                n = list(idx)
                n[axis] += d
                if not (0 <= n[axis] < shape[axis]) or not mask[tuple(n)]:
                    out[idx] = True
    return out


def brute_hd95(a, b, spacing):
    sa = np.argwhere(brute_surface(a)) * np.asarray(spacing)
    sb = np.argwhere(brute_surface(b)) * np.asarray(spacing)
    dists = []
    for p in sa:
        dists.append(min(np.linalg.norm(p - q) for q in sb))
    for q in sb:
        dists.append(min(np.linalg.norm(q - p) for p in sa))
    pooled = sorted(dists)
    # manual linear-interpolated percentile
    rank = 0.95 * (len(pooled) - 1)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    frac = rank - lo
    return pooled[lo] * (1 - frac) + pooled[hi] * frac


class TestDice:
    def test_perfect_overlap(self):
        a = np.zeros((3, 3, 3), dtype=int)
        a[0] = 2
        assert dice_score(a, a.copy(), 2) == 1.0

    def test_disjoint_sets(self):
        a = np.zeros((3, 3, 3), dtype=int)
        b = np.zeros((3, 3, 3), dtype=int)
        a[0, 0, 0] = 1
        b[2, 2, 2] = 1
        assert dice_score(a, b, 1) == 0.0

    def test_hand_counted_case(self):
        # |P|=2, |G|=3, |P ∩ G|=1 -> 2*1/(2+3) = 0.4
        p = np.zeros((2, 2, 2), dtype=int)
        g = np.zeros((2, 2, 2), dtype=int)
        p[0, 0, 0] = p[0, 0, 1] = 1
        g[0, 0, 0] = g[1, 1, 1] = g[1, 1, 0] = 1
        assert dice_score(p, g, 1) == pytest.approx(0.4)

    def test_both_empty_is_one(self):
        z = np.zeros((2, 2, 2), dtype=int)
        assert dice_score(z, z, 5) == 1.0

    def test_symmetry_and_brute_force_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            shape = tuple(rng.integers(2, 6, 3))
            a = rng.integers(0, 4, shape)
            b = rng.integers(0, 4, shape)
            for cls in range(4):
                d = dice_score(a, b, cls)
                assert d == pytest.approx(dice_score(b, a, cls), abs=1e-12)
                assert d == pytest.approx(brute_dice(a, b, cls), abs=1e-9)


class TestHd95:
    def test_identical_masks_zero(self):
        m = np.zeros((4, 4, 4), dtype=np.uint8)
        m[1:3, 1:3, 1:3] = 1
        assert hd95(m, m.copy()) == 0.0

    def test_single_voxels_three_apart(self):
        a = np.zeros((6, 6, 6), dtype=np.uint8)
        b = np.zeros((6, 6, 6), dtype=np.uint8)
        a[1, 1, 1] = 1
        b[4, 1, 1] = 1
        assert hd95(a, b, (1, 1, 1)) == pytest.approx(3.0)

    def test_spacing_scales_distances(self):
        a = np.zeros((6, 4, 4), dtype=np.uint8)
        b = np.zeros((6, 4, 4), dtype=np.uint8)
        a[1, 1, 1] = 1
        b[3, 1, 1] = 1
        assert hd95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(4.0)

    def test_two_voxel_vs_one_voxel_brute_force(self):
        a = np.zeros((5, 5, 5), dtype=np.uint8)
        b = np.zeros((5, 5, 5), dtype=np.uint8)
        a[1, 1, 1] = a[1, 1, 2] = 1
        b[3, 3, 3] = 1
        assert hd95(a, b) == pytest.approx(brute_hd95(a, b, (1, 1, 1)), abs=1e-6)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(1)
        done = 0
        while done < 15:
            shape = tuple(rng.integers(3, 6, 3))
            a = (rng.random(shape) < 0.35).astype(np.uint8)
            b = (rng.random(shape) < 0.35).astype(np.uint8)
            if a.sum() == 0 or b.sum() == 0:
                continue
            for spacing in ((1, 1, 1), (1.0, 2.0, 0.5)):
                assert hd95(a, b, spacing) == pytest.approx(
                    brute_hd95(a, b, spacing), abs=1e-6
                )
            assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)
            done += 1

    def test_empty_mask_undefined(self):
        a = np.zeros((3, 3, 3), dtype=np.uint8)
        b = np.zeros((3, 3, 3), dtype=np.uint8)
        b[1, 1, 1] = 1
        with pytest.raises(UndefinedMetric):
            hd95(a, b)
        with pytest.raises(UndefinedMetric):
            hd95(b, a)


class TestMajorityVote:
    def _maps(self, arrays):
        return [LabelMap(data=np.asarray(a, dtype=np.int16)) for a in arrays]

    def test_identical_maps(self):
        m = np.full((2, 2, 2), 3)
        out = majority_vote(self._maps([m, m, m]))
        assert (out.data == 3).all()

    def test_simple_majority(self):
        votes = [np.full((1, 1, 1), v) for v in (1, 1, 2)]
        assert majority_vote(self._maps(votes)).data[0, 0, 0] == 1

    def test_tie_breaks_to_lowest_id(self):
        votes = [np.full((1, 1, 1), v) for v in (2, 5)]
        assert majority_vote(self._maps(votes)).data[0, 0, 0] == 2

    def test_matches_exhaustive_count(self):
        rng = np.random.default_rng(2)
        preds = [rng.integers(0, 8, (3, 3, 3)) for _ in range(5)]
        out = majority_vote(self._maps(preds))
        for idx in np.ndindex(3, 3, 3):
            votes = [int(p[idx]) for p in preds]
            counts = {c: votes.count(c) for c in set(votes)}
            best = max(counts.values())
            winners = sorted(c for c, n in counts.items() if n == best)
            assert out.data[idx] == winners[0]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        preds = [rng.integers(0, 8, (3, 3, 3)) for _ in range(4)]
        a = majority_vote(self._maps(preds))
        b = majority_vote(self._maps(list(reversed(preds))))
        assert (a.data == b.data).all()

    def test_empty_list_rejected(self):
        with pytest.raises(InputError):
            majority_vote([])

    def test_mismatched_inputs_rejected(self):
        with pytest.raises(InputError):
            majority_vote(
                self._maps([np.zeros((2, 2, 2))]) + self._maps([np.zeros((3, 3, 3))])
            )


class TestRegionDice:
    def test_restricted_to_region(self):
        gt = np.full((4, 4, 4), 3, dtype=np.uint8)
        pred = np.full((4, 4, 4), 1, dtype=np.uint8)
        region = np.zeros((4, 4, 4), dtype=np.uint8)
        region[0] = 1
        pred[0] = 3
        assert region_dice(pred, gt, region) == pytest.approx(1.0)

    def test_empty_region_is_nan(self):
        z = np.zeros((2, 2, 2), dtype=np.uint8)
        assert np.isnan(region_dice(z, z, z))


def test_paste_lesion():
    anat = np.full((2, 2, 2), 3, dtype=np.uint8)
    mask = np.zeros((2, 2, 2), dtype=np.uint8)
    mask[0, 0, 0] = 1
    out = paste_lesion(anat, mask)
    assert out[0, 0, 0] == 4 and out[1, 1, 1] == 3
