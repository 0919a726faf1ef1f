import copy

import numpy as np
import pytest

from holosplat import training as tr
from holosplat.config import make_config
from holosplat.synthetic import make_scene

SMALL = dict(hash_levels=2, hash_min_res=2, hash_max_res=8, hash_log2_table_size=8, mlp_width=16,
             feature_width=8, log_every=0, densify_from=5, densify_interval=5, densify_until=40,
             opacity_reset_interval=1000)


@pytest.fixture(scope="module")
def scene():
    sc = make_scene(8, 8, 32, seed=3)
    views = [tr.TrainView(c, im.astype(np.float32), c.name) for c, im in zip(sc.cameras, sc.render_images())]
    return sc, views


def _state(scene, **kw):
    sc, views = scene
    cfg = make_config("desk", **{**SMALL, **kw})
    return tr.init_state(cfg, sc.seed_points, sc.seed_colors, [v.cam for v in views]), views


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays().values(), b.arrays().values()))


def _phi_equal(a, b):
    pa, pb = a.named_params(), b.named_params()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


@pytest.fixture(scope="module")
def after_coarse(scene):
    st, views = _state(scene)
    tr.train_coarse(st, views, iterations=30)
    return st, views


class TestCoarse:
    def test_zero_iterations_unchanged(self, scene):
        st, views = _state(scene)
        before = st.coarse.copy()
        tr.train_coarse(st, views, iterations=0)
        assert _same(before, st.coarse)
        assert st.stage == "coarse" and st.phi.frozen and len(st.phi.pool) == len(st.coarse)

    def test_infinite_threshold_keeps_count(self, scene):
        st, views = _state(scene, densify_grad_threshold=float("inf"), min_opacity=0.0)
        n = len(st.coarse)
        tr.train_coarse(st, views, iterations=30)
        assert len(st.coarse) == n

    def test_densification_grows(self, scene):
        st, views = _state(scene, densify_grad_threshold=0.0, min_opacity=0.0)
        n = len(st.coarse)
        tr.train_coarse(st, views, iterations=12)
        assert len(st.coarse) > n

    def test_loss_decreases(self, scene):
        st, views = _state(scene)
        rep = tr.train_coarse(st, views, iterations=60)
        assert rep.smoothed("end", 10) < rep.smoothed("start", 10)

    def test_phi_untouched(self, scene):
        st, views = _state(scene)
        before = copy.deepcopy(st.phi)
        tr.train_coarse(st, views, iterations=10)
        assert np.array_equal(before.field.tables, st.phi.field.tables)
        for m0, m1 in zip(before.decoder.mlps(), st.phi.decoder.mlps()):
            assert all(np.array_equal(a, b) for a, b in zip(m0.params(), m1.params()))

    def test_seed_determinism(self, scene):
        a, views = _state(scene)
        b, _ = _state(scene)
        tr.train_coarse(a, views, iterations=15)
        tr.train_coarse(b, views, iterations=15)
        assert _same(a.coarse, b.coarse)


class TestDetailJoint:
    def test_detail_keeps_coarse_and_moves_phi(self, after_coarse):
        st0, views = after_coarse
        st = tr.branch_after_coarse(st0)
        before_c, before_p = st.coarse.copy(), copy.deepcopy(st.phi)
        tr.train_detail(st, views, iterations=1)
        assert _same(before_c, st.coarse)
        assert not _phi_equal(before_p, st.phi)

    def test_joint_keeps_count(self, after_coarse):
        st0, views = after_coarse
        st = tr.branch_after_coarse(st0)
        tr.train_detail(st, views, iterations=3)
        n = len(st.coarse)
        before = st.coarse.copy()
        tr.train_joint(st, views, iterations=5)
        assert len(st.coarse) == n and not _same(before, st.coarse)

    def test_joint_without_phi_is_finetune(self, after_coarse):
        st0, views = after_coarse
        a = tr.branch_after_coarse(st0)
        tr.train_detail(a, views, iterations=3)
        b = copy.deepcopy(a)
        tr.train_joint(a, views, iterations=6, train_phi=False)
        tr.finetune_coarse(b, views, 6)
        assert _same(a.coarse, b.coarse)

    def test_branch_equals_from_scratch(self, scene):
        base, views = _state(scene)
        tr.train_coarse(base, views, iterations=20)
        branched = tr.branch_after_coarse(base, use_attention=False)
        tr.train_detail(branched, views, iterations=4)

        fresh, _ = _state(scene, use_attention=False)
        tr.train_coarse(fresh, views, iterations=20)
        tr.train_detail(fresh, views, iterations=4)
        assert _same(branched.coarse, fresh.coarse)
        assert _phi_equal(branched.phi, fresh.phi)

    def test_pool_clamped(self, after_coarse):
        st0, views = after_coarse
        st = tr.branch_after_coarse(st0, lr_offset=1.0)
        tr.train_detail(st, views, iterations=5)
        cap = st.cfg.offset_cap_frac * st.phi.diagonal()
        assert np.linalg.norm(st.phi.pool.offsets, axis=1).max() <= cap * (1 + 1e-5)


class TestOrdering:
    def test_detail_before_coarse(self, scene):
        st, views = _state(scene)
        with pytest.raises(tr.OrderingError):
            tr.train_detail(st, views, iterations=1)

    def test_joint_before_detail(self, after_coarse):
        st0, views = after_coarse
        st = tr.branch_after_coarse(st0)
        with pytest.raises(tr.OrderingError):
            tr.train_joint(st, views, iterations=1)

    def test_coarse_twice(self, after_coarse):
        st0, views = after_coarse
        with pytest.raises(tr.OrderingError):
            tr.train_coarse(tr.branch_after_coarse(st0), views, iterations=1)

    def test_branch_needs_coarse(self, scene):
        st, _ = _state(scene)
        with pytest.raises(tr.OrderingError):
            tr.branch_after_coarse(st)


class TestDivided:
    def test_one_block_equals_coarse(self, scene):
        sc, views = scene
        cfg = make_config("desk", **{**SMALL, "iterations_coarse": 15})
        merged, reps = tr.train_divided(cfg, sc.seed_points, sc.seed_colors, views, 1)
        st = tr.init_state(cfg, sc.seed_points, sc.seed_colors, [v.cam for v in views])
        tr.train_coarse(st, views)
        assert len(reps) == 1
        assert _same(merged, st.coarse)

    def test_merged_count_is_sum(self, scene):
        sc, views = scene
        cfg = make_config("desk", **{**SMALL, "iterations_coarse": 10})
        merged, reps = tr.train_divided(cfg, sc.seed_points, sc.seed_colors, views, 2)
        assert len(merged) == sum(r.n_gaussians for r in reps)

    def test_block_bounds(self):
        pts = np.array([[0, 0, 0], [4, 1, 0], [2, 0.5, 0.1]])
        axis, edges = tr.block_bounds(pts, 2)
        assert axis == 0
        np.testing.assert_allclose(edges, [0, 2, 4])


class TestMisc:
    def test_split_views(self):
        train, test = tr.split_views(list(range(16)), 0)
        assert test == [0, 4, 8, 12] and len(train) == 12
        train, test = tr.split_views(list(range(10)), 3)
        assert test == [0, 3, 6, 9]

    def test_sampler_epochs(self):
        s = tr.ViewSampler(5, np.random.default_rng(0))
        first = [s.next() for _ in range(5)]
        assert sorted(first) == list(range(5))

    def test_extent(self):
        from holosplat.scene import Camera
        cams = [Camera.look_at([x, 0, 1], [x, 0, 0], (0, 1, 0)) for x in (-1.0, 1.0)]
        assert tr.scene_extent(cams) == pytest.approx(1.1)

    def test_tiny_reconstruction(self):
        sc = make_scene(5, 8, 32, seed=11)
        views = [tr.TrainView(c, im.astype(np.float32), c.name)
                 for c, im in zip(sc.cameras, sc.render_images())]
        cfg = make_config("desk", log_every=0, iterations_coarse=400, densify_from=100,
                          densify_interval=100, densify_until=300)
        st = tr.init_state(cfg, sc.seed_points, sc.seed_colors, [v.cam for v in views])
        tr.train_coarse(st, views)
        assert np.mean([p for p, _ in tr.evaluate(st, views, "all")]) >= 30.0
