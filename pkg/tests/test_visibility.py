import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holosplat.scene import GaussianSet
from holosplat.visibility import (VisibilityConfig, VisibleSelection, gather, gather_backward,
                                  select_visible)

from helpers import front_camera, random_camera, random_set
from oracles import brute_force_visible


def _set(means, logit=2.0, log_scale=-3.0):
    n = len(means)
    return GaussianSet(np.array(means, float), np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), log_scale),
                       np.full(n, logit), np.zeros((n, 1, 3)))


class TestSelect:
    def test_in_front_and_behind(self):
        cam = front_camera()
        sel = select_visible(_set([[0, 0, 0], [0, 0, -5], [0, 0, 200]]), cam)
        assert sel.indices.tolist() == [0]

    def test_transparent_dropped(self):
        gs = _set([[0, 0, 0], [0.1, 0, 0]])
        gs.opacity_logits[1] = -10.0
        assert select_visible(gs, front_camera()).indices.tolist() == [0]

    def test_margin_keeps_edge_splat(self):
        cam = front_camera()
        # centre just outside the left image border; a big footprint keeps it
        x = -(cam.cx + 2.0) * 3.0 / cam.fx
        assert select_visible(_set([[x, 0, 0]], log_scale=-1.0), cam).count == 1
        assert select_visible(_set([[x, 0, 0]], log_scale=-8.0), cam).count == 0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            select_visible(GaussianSet.zeros(0, dtype=np.float64), front_camera())

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        cfg = VisibilityConfig()
        for _ in range(200):
            gs = random_set(rng, int(rng.integers(1, 30)), spread=2.0)
            cam = random_camera(rng, size=int(rng.integers(8, 40)))
            want = brute_force_visible(gs.means, gs.quats, gs.log_scales, gs.opacity_logits, cam,
                                       cfg.opacity_threshold, cfg.margin_scale, cfg.margin_cap_px)
            assert select_visible(gs, cam, cfg).indices.tolist() == want

    def test_zero_threshold_keeps_every_splat_in_view(self):
        rng = np.random.default_rng(1)
        gs = random_set(rng, 40, spread=0.2)
        gs.opacity_logits[:] = -30.0
        sel = select_visible(gs, front_camera(), VisibilityConfig(opacity_threshold=0.0))
        assert sel.count == 40

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_threshold_monotone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        gs = random_set(rng, 25, spread=1.5)
        cam = random_camera(rng)
        lo, hi = sorted((t1, t2))
        a = set(select_visible(gs, cam, VisibilityConfig(opacity_threshold=lo)).indices.tolist())
        b = set(select_visible(gs, cam, VisibilityConfig(opacity_threshold=hi)).indices.tolist())
        assert b <= a

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        gs, cam = random_set(rng, 50), random_camera(rng)
        np.testing.assert_array_equal(select_visible(gs, cam).indices, select_visible(gs, cam).indices)


class TestSelection:
    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            VisibleSelection(np.array([3, 1]))

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            VisibleSelection(np.array([1, 1]))

    def test_gather_out_of_range(self):
        gs = _set([[0, 0, 0]])
        with pytest.raises(IndexError):
            gather(gs, VisibleSelection(np.array([0, 1])))

    def test_gather_and_scatter(self):
        rng = np.random.default_rng(3)
        gs = random_set(rng, 6)
        sel = VisibleSelection(np.array([1, 4]))
        sub = gather(gs, sel)
        np.testing.assert_array_equal(sub.means, gs.means[[1, 4]])
        back = gather_backward(sub, sel, 6)
        np.testing.assert_array_equal(back.means[[1, 4]], gs.means[[1, 4]])
        assert np.all(back.means[[0, 2, 3, 5]] == 0)
