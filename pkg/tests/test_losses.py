import numpy as np
import pytest

from voxcorr.losses import grad_l2_loss, ncc_loss, total_loss
from voxcorr.volume import VolumeError

from .test_layers import fd_check


class TestNccLoss:
    def test_self_similarity_near_minus_one(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, size=(12, 12, 12))
        loss, _ = ncc_loss(a, a.copy(), window=5)
        assert loss == pytest.approx(-1.0, abs=1e-3)

    def test_constant_target_near_zero(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, size=(10, 10, 10))
        b = np.full_like(a, 0.5)
        loss, _ = ncc_loss(a, b, window=5)
        assert abs(loss) <= 1e-3

    def test_loss_range(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            a = np.random.default_rng(seed).uniform(0, 1, (8, 8, 8))
            b = np.random.default_rng(seed + 100).uniform(0, 1, (8, 8, 8))
            loss, _ = ncc_loss(a, b, window=3)
            assert -1.0 <= loss <= 0.0

    def test_even_window_rejected(self):
        with pytest.raises(VolumeError):
            ncc_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), window=4)

    def test_window_larger_than_patch_rejected(self):
        with pytest.raises(VolumeError):
            ncc_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), window=5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, size=(8, 8, 8))
        b = rng.uniform(0, 1, size=(8, 8, 8))

        def loss():
            return ncc_loss(a, b, window=3)[0]

        _, g = ncc_loss(a, b, window=3)
        fd_check(loss, a, g, rng, n_samples=30, rel=1e-3)

    def test_intensity_shift_invariance(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, size=(9, 9, 9))
        b = rng.uniform(0, 1, size=(9, 9, 9))
        l1, _ = ncc_loss(a, b, window=3)
        l2, _ = ncc_loss(a, 0.5 * b + 0.2, window=3)
        # local 0.5x scaling changes variances identically in num and denom
        assert l1 == pytest.approx(l2, abs=2e-3)


class TestGradL2Loss:
    def test_constant_field_zero(self):
        loss, g = grad_l2_loss(np.full((3, 5, 5, 5), 2.5))
        assert loss == 0.0
        assert np.all(g == 0.0)

    def test_unit_ramp_closed_form(self):
        u = np.zeros((3, 4, 4, 4))
        u[0] = np.arange(4, dtype=np.float64)[None, None, :]  # ux = x
        loss, _ = grad_l2_loss(u)
        # 48 unit x-differences of ux among 432 difference samples (3 axes x
        # 3 channels x 48 each), zero terms included in the mean
        assert loss == pytest.approx(48 / 432)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal((3, 5, 5, 5))

        def loss():
            return grad_l2_loss(u)[0]

        _, g = grad_l2_loss(u)
        fd_check(loss, u, g, rng, rel=1e-3)


class TestTotalLoss:
    def test_lambda_zero_is_pure_similarity(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, (8, 8, 8))
        b = rng.uniform(0, 1, (8, 8, 8))
        disp = rng.standard_normal((3, 8, 8, 8))
        loss, _, d_disp = total_loss(a, b, disp, lam=0.0, window=3)
        assert loss == ncc_loss(a, b, 3)[0]
        assert np.all(d_disp == 0.0)

    def test_perfect_alignment_zero_disp(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0, 1, (10, 10, 10))
        loss, _, _ = total_loss(a, a.copy(), np.zeros((3, 10, 10, 10)), lam=0.05, window=5)
        assert loss == pytest.approx(-1.0, abs=1e-3)

    def test_doubling_lambda_doubles_smoothness_term(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, (8, 8, 8))
        b = rng.uniform(0, 1, (8, 8, 8))
        disp = rng.standard_normal((3, 8, 8, 8))
        sim = ncc_loss(a, b, 3)[0]
        l1, _, _ = total_loss(a, b, disp, lam=0.05, window=3)
        l2, _, _ = total_loss(a, b, disp, lam=0.10, window=3)
        assert l2 - sim == pytest.approx(2 * (l1 - sim), rel=1e-12)
