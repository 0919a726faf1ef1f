import numpy as np
import pytest

from holosplat.metrics import gaussian_window, l1_loss, psnr, ssim, total_loss

from oracles import central_diff, naive_ssim, rel_error
from oracles import gaussian_window as oracle_window


class TestL1:
    def test_zero(self):
        a = np.random.default_rng(0).uniform(size=(4, 4, 3))
        v, g = l1_loss(a, a)
        assert v == 0 and np.all(g == 0)

    def test_constant_offset(self):
        a = np.zeros((2, 3, 3))
        v, g = l1_loss(a + 0.25, a)
        assert v == pytest.approx(0.25)
        np.testing.assert_allclose(g, 1 / a.size)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_gradient_fd(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
        _, g = l1_loss(a, b)
        assert rel_error(g, central_diff(lambda x: l1_loss(x, b)[0], a)) < 1e-6


class TestSsim:
    def test_window(self):
        np.testing.assert_allclose(gaussian_window(), oracle_window(), atol=1e-15)
        assert gaussian_window().sum() == pytest.approx(1.0)

    def test_identical(self):
        a = np.random.default_rng(2).uniform(size=(12, 12, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images(self):
        a, b = np.full((8, 8, 3), 0.2), np.full((8, 8, 3), 0.6)
        c1 = 0.01 ** 2
        want = (2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(want, rel=1e-9)

    def test_matches_naive(self):
        rng = np.random.default_rng(3)
        for shape in ((9, 13, 3), (16, 16, 1), (5, 4, 2)):
            a, b = rng.uniform(size=shape), rng.uniform(size=shape)
            assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(10, 10, 3)), rng.uniform(size=(10, 10, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_gradient_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a, b = rng.uniform(size=(7, 9, 3)), rng.uniform(size=(7, 9, 3))
            _, g = ssim(a, b, with_grad=True)
            assert rel_error(g, central_diff(lambda x: ssim(x, b), a)) < 1e-6


class TestPsnr:
    def test_twenty_db(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a + 0.1, a) == pytest.approx(20.0)

    def test_zero_db(self):
        assert psnr(np.ones((2, 2, 3)), np.zeros((2, 2, 3))) == pytest.approx(0.0)

    def test_identical_is_inf(self):
        a = np.ones((2, 2, 3))
        assert psnr(a, a) == float("inf")

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(size=(8, 8, 3))
        n = rng.normal(size=gt.shape)
        vals = [psnr(gt + s * n, gt) for s in (0.01, 0.02, 0.05, 0.1)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


class TestTotal:
    def test_breakdown(self):
        rng = np.random.default_rng(7)
        a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
        br, _ = total_loss(a, b, 0.2)
        assert br.total == pytest.approx(br.l1 + 0.2 * (1 - br.ssim))

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), -1.0)

    def test_gradient_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = rng.uniform(size=(6, 7, 3)), rng.uniform(size=(6, 7, 3))
            _, g = total_loss(a, b, 0.2)
            assert rel_error(g, central_diff(lambda x: total_loss(x, b, 0.2)[0].total, a)) < 1e-6
