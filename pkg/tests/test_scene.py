import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holosplat import sh as shmod
from holosplat.scene import (Camera, DomainError, Gaussian, GaussianSet, activate, activate_backward,
                             build_covariance, build_covariance_backward, eval_color, eval_gaussian,
                             eval_gaussian_grad, quat_to_rotmat, rotmat_to_quat)

from oracles import central_diff, rel_error

LN2 = np.log(2.0)
QZ90 = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])


def _g(mu=(0, 0, 0), rot=(1, 0, 0, 0), log_scale=(0, 0, 0), color=None, degree=0):
    sh = np.zeros(((degree + 1) ** 2, 3)) if color is None else color
    return Gaussian(np.array(mu, float), np.array(rot, float), np.array(log_scale, float), 0.0, sh)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3), atol=1e-15)

    def test_axis_scale(self):
        np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [LN2, 0, 0]), np.diag([4, 1, 1]),
                                   atol=1e-12)

    def test_rotated_90_about_z(self):
        np.testing.assert_allclose(build_covariance(QZ90, [LN2, 0, 0]), np.diag([1, 4, 1]), atol=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(DomainError):
            build_covariance([0, 0, 0, 0], [0, 0, 0])

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            build_covariance([1, 0, 0, 0], [np.nan, 0, 0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_symmetric_psd(self, q, ls):
        q = np.array(q)
        if np.linalg.norm(q) < 1e-3:
            q = np.array([1.0, 0, 0, 0])
        cov = build_covariance(q, ls)
        assert np.max(np.abs(cov - cov.T)) <= 1e-12 * max(1.0, np.abs(cov).max())
        assert np.linalg.eigvalsh(cov).min() >= -1e-12 * np.abs(cov).max()

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            q, ls = rng.normal(size=4), rng.uniform(-1, 1, 3)
            w = rng.normal(size=(3, 3))
            dq, dls = build_covariance_backward(q, ls, w)
            fq = central_diff(lambda x: np.sum(w * build_covariance(x, ls)), q, 1e-5)
            fl = central_diff(lambda x: np.sum(w * build_covariance(q, x)), ls, 1e-5)
            assert rel_error(dq, fq) < 1e-5
            assert rel_error(dls, fl) < 1e-5


class TestRotations:
    def test_rotmat_quat_roundtrip(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(50, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q *= np.sign(q[:, :1])
        for qi in q:
            np.testing.assert_allclose(rotmat_to_quat(quat_to_rotmat(qi)), qi, atol=1e-12)


class TestEvalGaussian:
    def test_at_mean(self):
        assert eval_gaussian(_g(mu=(1, 2, 3)), [1, 2, 3]) == 1.0

    def test_unit_offset(self):
        assert eval_gaussian(_g(), [1, 0, 0]) == pytest.approx(np.exp(-0.5), rel=1e-8)

    def test_scaled_axis(self):
        assert eval_gaussian(_g(log_scale=(LN2, 0, 0)), [2, 0, 0]) == pytest.approx(np.exp(-0.5), rel=1e-8)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.normal(size=4)
            g = _g(mu=rng.normal(size=3), rot=q, log_scale=rng.uniform(-1, 1, 3))
            x = g.mu + rng.normal(size=3)
            qr = rng.normal(size=4)
            qr /= np.linalg.norm(qr)
            R = quat_to_rotmat(qr)
            qn = q / np.linalg.norm(q)
            w1, v1 = qr[0], qr[1:]
            w2, v2 = qn[0], qn[1:]
            qprod = np.concatenate([[w1 * w2 - v1 @ v2], w1 * v2 + w2 * v1 + np.cross(v1, v2)])
            g2 = _g(mu=g.mu, rot=qprod, log_scale=g.log_scale)
            assert eval_gaussian(g2, g.mu + R @ (x - g.mu)) == pytest.approx(eval_gaussian(g, x), abs=1e-9)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mu, q, ls = rng.normal(size=3), rng.normal(size=4), rng.uniform(-0.5, 0.5, 3)
            x = mu + 0.7 * rng.normal(size=3)
            _, grads = eval_gaussian_grad(_g(mu, q, ls), x)
            checks = {
                "mu": central_diff(lambda v: eval_gaussian(_g(v, q, ls), x), mu, 1e-5),
                "x": central_diff(lambda v: eval_gaussian(_g(mu, q, ls), v), x, 1e-5),
                "rot": central_diff(lambda v: eval_gaussian(_g(mu, v, ls), x), q, 1e-5),
                "log_scale": central_diff(lambda v: eval_gaussian(_g(mu, q, v), x), ls, 1e-5),
            }
            for k, fd in checks.items():
                assert rel_error(grads[k], fd) < 1e-5, k


class TestColor:
    def test_dc_red(self):
        sh = np.zeros((1, 3))
        sh[0] = shmod.rgb_to_dc(np.array([1.0, 0, 0]))
        for d in ([0, 0, 1], [1, 0, 0], [0, -1, 0]):
            np.testing.assert_allclose(eval_color(_g(color=sh), d), [1, 0, 0], atol=1e-12)

    def test_zero_coeffs_give_grey(self):
        np.testing.assert_allclose(eval_color(_g(), [0, 0, 1]), [0.5, 0.5, 0.5])

    def test_degree1_odd(self):
        rng = np.random.default_rng(4)
        sh = np.zeros((4, 3))
        sh[1:] = rng.normal(0, 0.1, (3, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        up = eval_color(_g(color=sh, degree=1), d) - 0.5
        down = eval_color(_g(color=sh, degree=1), -d) - 0.5
        np.testing.assert_allclose(up, -down, atol=1e-12)

    def test_sh_backward_fd(self):
        rng = np.random.default_rng(5)
        for degree in range(4):
            k = (degree + 1) ** 2
            sh = rng.normal(0, 0.2, (6, k, 3))
            dirs = rng.normal(size=(6, 3))
            w = rng.normal(size=(6, 3))
            _, cache = shmod.eval_sh_colors(sh, dirs)
            dsh, ddir = shmod.eval_sh_colors_backward(cache, w)
            f_sh = central_diff(lambda v: np.sum(w * shmod.eval_sh_colors(v, dirs)[0]), sh)
            f_d = central_diff(lambda v: np.sum(w * shmod.eval_sh_colors(sh, v)[0]), dirs)
            assert rel_error(dsh, f_sh) < 1e-6
            assert rel_error(ddir, f_d) < 1e-6


class TestGaussianSet:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            GaussianSet(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 1, 3)))

    def test_concat_take(self):
        rng = np.random.default_rng(6)
        a = GaussianSet.from_points(rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)), dtype=np.float64)
        both = GaussianSet.concat([a, a])
        assert len(both) == 10
        np.testing.assert_array_equal(both.take(np.arange(5, 10)).means, a.means)

    def test_activate_backward_fd(self):
        rng = np.random.default_rng(7)
        gs = GaussianSet(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.uniform(-1, 0, (5, 3)),
                         rng.normal(size=5), rng.normal(0, 0.2, (5, 4, 3)))
        center = np.array([0.3, -2.0, 0.5])
        vg, cache = activate(gs, center)
        up = vg.zeros_like()
        for k, v in up.arrays().items():
            v[...] = rng.normal(size=v.shape)
        g = activate_backward(gs, cache, up)

        def f(name):
            def inner(val):
                kw = gs.copy().arrays()
                kw[name] = val
                out, _ = activate(GaussianSet(**kw), center)
                return sum(np.sum(a * b) for a, b in zip(out.arrays().values(), up.arrays().values()))
            return inner

        for name in ("means", "quats", "log_scales", "opacity_logits", "sh"):
            fd = central_diff(f(name), gs.arrays()[name])
            assert rel_error(g.arrays()[name], fd) < 1e-6, name


class TestCamera:
    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            Camera(np.diag([1, 1, 2.0]), np.zeros(3), 10, 10, 5, 5, 10, 10)

    def test_bad_clip(self):
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.zeros(3), 10, 10, 5, 5, 10, 10, near=1.0, far=0.5)

    def test_look_at_centre_projects_to_principal_point(self):
        cam = Camera.look_at([1, 2, 3], [0, 0, 0], fov_deg=50, width=40, height=30)
        np.testing.assert_allclose(cam.center, [1, 2, 3], atol=1e-12)
        pc = cam.world_to_camera(np.zeros(3))
        assert pc[2] > 0
        np.testing.assert_allclose(pc[:2], 0, atol=1e-12)

    def test_scaled_by_four(self):
        cam = Camera(np.eye(3), np.zeros(3), 800.0, 810.0, 516.0, 388.0, 1036, 776)
        s = cam.scaled(4)
        assert (s.fx, s.fy, s.cx, s.cy, s.width, s.height) == (200.0, 202.5, 129.0, 97.0, 259, 194)

    def test_scaled_preserves_ratio(self):
        cam = Camera(np.eye(3), np.zeros(3), 800.0, 810.0, 517.0, 389.0, 1037, 777)
        s = cam.scaled(4)
        assert (s.width, s.height) == (259, 194)
        assert abs(s.cx / s.width - cam.cx / cam.width) < 1e-9
        assert abs(s.cy / s.height - cam.cy / cam.height) < 1e-9
