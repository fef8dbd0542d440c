import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcorr.metrics import BDM_OUTSIDE, bdm, dice, endpoint_error, evaluate_pair
from voxcorr.volume import BinaryVolume, DisplacementField, ScalarVolume, VolumeError


def mask_of(arr):
    return BinaryVolume(np.asarray(arr, dtype=bool))


def random_mask_pair(seed, shape=(6, 6, 6), p=0.4):
    rng = np.random.default_rng(seed)
    a = rng.random(shape) < p
    b = rng.random(shape) < p
    if not (a | b).any():
        a[0, 0, 0] = True
    return mask_of(a), mask_of(b)


class TestDice:
    def test_identical_masks(self):
        a, _ = random_mask_pair(0)
        assert dice(a, a) == 100.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert dice(mask_of(a), mask_of(b)) == 0.0

    def test_hand_arithmetic(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a.ravel()[:8] = True
        b.ravel()[4:12] = True
        assert dice(mask_of(a), mask_of(b)) == pytest.approx(50.0)

    def test_both_empty_is_perfect(self):
        e = mask_of(np.zeros((3, 3, 3), bool))
        assert dice(e, e) == 100.0

    def test_symmetry(self):
        a, b = random_mask_pair(1)
        assert dice(a, b) == dice(b, a)

    def test_dims_mismatch(self):
        with pytest.raises(VolumeError):
            dice(mask_of(np.zeros((3, 3, 3), bool)), mask_of(np.zeros((4, 4, 4), bool)))


class TestBdm:
    def test_identical_masks(self):
        a, _ = random_mask_pair(2)
        r = bdm(a, a)
        assert (r.bdm_minus1_pct, r.bdm_zero_pct, r.bdm_plus1_pct) == (0.0, 100.0, 0.0)

    def test_hand_arithmetic(self):
        cad = np.zeros((4, 4, 4), bool)
        cad.ravel()[:8] = True
        xct = cad.copy()
        xct.ravel()[8:10] = True
        r = bdm(mask_of(xct), mask_of(cad))
        assert r.bdm_minus1_pct == pytest.approx(0.0)
        assert r.bdm_zero_pct == pytest.approx(80.0)
        assert r.bdm_plus1_pct == pytest.approx(20.0)

    def test_percentages_partition_union(self):
        for seed in range(50):
            a, b = random_mask_pair(seed)
            r = bdm(a, b)
            assert abs(r.bdm_minus1_pct + r.bdm_zero_pct + r.bdm_plus1_pct - 100.0) <= 1e-9

    def test_antisymmetry(self):
        a, b = random_mask_pair(3)
        r1 = bdm(a, b)
        r2 = bdm(b, a)
        assert r1.bdm_plus1_pct == r2.bdm_minus1_pct
        assert r1.bdm_minus1_pct == r2.bdm_plus1_pct
        u = r1.union
        np.testing.assert_array_equal(r1.map[u], -r2.map[u])
        np.testing.assert_array_equal(r1.union, r2.union)

    def test_outside_is_sentinel_only(self):
        a, b = random_mask_pair(4)
        r = bdm(a, b)
        assert np.all(r.map[~r.union] == BDM_OUTSIDE)
        assert np.all(np.isin(r.map[r.union], (-1, 0, 1)))

    def test_empty_union_rejected(self):
        e = mask_of(np.zeros((3, 3, 3), bool))
        with pytest.raises(VolumeError):
            bdm(e, e)

    def test_dice_jaccard_identity(self):
        # oracle: Dice% = 200*J/(1+J) with J the BDM match fraction,
        # verified against brute-force set counts
        for seed in range(200):
            a, b = random_mask_pair(seed, p=0.3 + 0.4 * (seed % 3) / 2)
            inter = int((a.mask & b.mask).sum())
            union = int((a.mask | b.mask).sum())
            r = bdm(a, b)
            assert r.bdm_zero_pct == pytest.approx(100.0 * inter / union, abs=1e-12)
            j = r.bdm_zero_pct / 100.0
            assert dice(a, b) == pytest.approx(200.0 * j / (1.0 + j), abs=1e-9)


class TestEndpointError:
    def test_identical_fields(self):
        u = DisplacementField(np.random.default_rng(0).standard_normal((3, 4, 4, 4)))
        m = mask_of(np.ones((4, 4, 4), bool))
        assert endpoint_error(u, u, m) == (0.0, 0.0)

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        gt = DisplacementField(rng.standard_normal((3, 4, 4, 4)))
        pred = DisplacementField(gt.data + np.array([1.0, 0, 0])[:, None, None, None])
        m = mask_of(np.ones((4, 4, 4), bool))
        mean, mx = endpoint_error(pred, gt, m)
        assert mean == pytest.approx(1.0)
        assert mx == pytest.approx(1.0)

    def test_mean_bounded_by_max(self):
        rng = np.random.default_rng(2)
        a = DisplacementField(rng.standard_normal((3, 5, 5, 5)))
        b = DisplacementField(rng.standard_normal((3, 5, 5, 5)))
        m = mask_of(rng.random((5, 5, 5)) > 0.5)
        mean, mx = endpoint_error(a, b, m)
        assert mean <= mx

    def test_empty_mask_rejected(self):
        u = DisplacementField(np.zeros((3, 3, 3, 3)))
        with pytest.raises(VolumeError):
            endpoint_error(u, u, mask_of(np.zeros((3, 3, 3), bool)))


class TestEvaluatePair:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        cad = np.zeros((12, 12, 12), dtype=np.float32)
        cad[3:9, 3:9, 3:9] = 1.0
        xct = np.roll(cad, 2, axis=2) * 0.8 + rng.normal(0, 0.01, cad.shape).astype(np.float32)
        return ScalarVolume(cad), ScalarVolume(xct.astype(np.float32))

    def test_perfect_registration(self):
        cad, xct = self._pair()
        disp = DisplacementField(np.zeros((3, 12, 12, 12), dtype=np.float32))
        report, _, after = evaluate_pair(cad, xct, cad, disp, sample_id="t", method="learned")
        assert report.dice_after_pct == 100.0
        assert report.bdm_after["zero"] == 100.0
        assert report.mean_epe_vox is None

    def test_noop_registration_keeps_before_metrics(self):
        cad, xct = self._pair()
        disp = DisplacementField(np.zeros((3, 12, 12, 12), dtype=np.float32))
        report, _, _ = evaluate_pair(cad, xct, xct, disp)
        assert report.dice_after_pct == pytest.approx(report.dice_before_pct)
        assert report.bdm_after == pytest.approx(report.bdm_before)

    def test_epe_reported_with_ground_truth(self):
        cad, xct = self._pair()
        disp = DisplacementField(np.zeros((3, 12, 12, 12), dtype=np.float32))
        gt = DisplacementField(np.ones((3, 12, 12, 12), dtype=np.float32))
        report, _, _ = evaluate_pair(cad, xct, xct, disp, gt_disp=gt)
        assert report.mean_epe_vox == pytest.approx(np.sqrt(3.0))
        assert report.max_epe_vox == pytest.approx(np.sqrt(3.0))

    def test_report_json_schema(self):
        cad, xct = self._pair()
        disp = DisplacementField(np.zeros((3, 12, 12, 12), dtype=np.float32))
        report, _, _ = evaluate_pair(cad, xct, cad, disp, sample_id="s", method="learned", runtime_sec=1.5)
        d = report.to_json()
        assert set(d) == {
            "sample_id", "method", "dice_before_pct", "dice_after_pct",
            "bdm_before", "bdm_after", "mean_epe_vox", "max_epe_vox", "runtime_sec",
        }
        assert set(d["bdm_before"]) == {"minus1", "zero", "plus1"}
        assert d["runtime_sec"] == 1.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), p=st.floats(0.1, 0.9))
def test_metric_identities_property(seed, p):
    a, b = random_mask_pair(seed, p=p)
    r = bdm(a, b)
    assert abs(r.bdm_minus1_pct + r.bdm_zero_pct + r.bdm_plus1_pct - 100.0) <= 1e-9
    j = r.bdm_zero_pct / 100.0
    assert dice(a, b) == pytest.approx(200.0 * j / (1.0 + j), abs=1e-9)
