import numpy as np
import pytest

from holosplat.config import ConfigError, RunConfig, load_config, make_config, parse_config
from holosplat.optim import Adam, exp_lr


class TestAdam:
    def test_zero_gradient_leaves_param(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = Adam()
        for _ in range(5):
            opt.step("p", p, np.zeros(3), 0.1)
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_is_lr_times_sign(self):
        p = np.zeros(3)
        Adam().step("p", p, np.array([2.0, -0.5, 1e-3]), 0.01)
        np.testing.assert_allclose(p, [-0.01, 0.01, -0.01], rtol=1e-9)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=4)
        q = p.copy()
        m = v = np.zeros(4)
        opt = Adam(eps=1e-8)
        for t in range(1, 11):
            g = rng.normal(size=4)
            opt.step("p", p, g, 0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            q = q - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, q, rtol=1e-6)

    def test_groups_have_own_steps(self):
        opt = Adam()
        a, b = np.zeros(2), np.zeros(2)
        opt.step("a", a, np.ones(2), 0.1)
        opt.step("a", a, np.ones(2), 0.1)
        opt.step("b", b, np.ones(2), 0.1)
        assert opt.state["a"]["step"] == 2 and opt.state["b"]["step"] == 1

    def test_remap(self):
        opt = Adam()
        p = np.zeros((3, 2))
        opt.step("p", p, np.arange(6.0).reshape(3, 2), 0.1)
        opt.remap("p", np.array([True, False, True]), 2)
        m = opt.state["p"]["m"]
        assert m.shape == (4, 2)
        np.testing.assert_allclose(m[:2], 0.1 * np.array([[0, 1], [4, 5.0]]))
        assert np.all(m[2:] == 0)


class TestExpLr:
    def test_endpoints(self):
        assert exp_lr(0, 1e-2, 1e-4, 100) == pytest.approx(1e-2)
        assert exp_lr(100, 1e-2, 1e-4, 100) == pytest.approx(1e-4)
        assert exp_lr(500, 1e-2, 1e-4, 100) == pytest.approx(1e-4)

    def test_midpoint_is_geometric_mean(self):
        assert exp_lr(50, 1e-2, 1e-4, 100) == pytest.approx(1e-3)


class TestConfig:
    def test_desk_profile(self):
        cfg = make_config("desk")
        assert (cfg.iterations_coarse, cfg.iterations_detail, cfg.iterations_joint) == (2000, 2000, 2000)
        assert (cfg.hash_levels, cfg.hash_features, cfg.hash_log2_table_size) == (4, 2, 14)
        assert (cfg.hash_min_res, cfg.hash_max_res) == (4, 64)

    def test_full_profile(self):
        cfg = make_config("full")
        assert (cfg.iterations_coarse, cfg.iterations_detail, cfg.iterations_joint) == (30000, 40000, 260000)
        assert (cfg.hash_levels, cfg.hash_log2_table_size, cfg.hash_min_res, cfg.hash_max_res) == (16, 19, 16, 2048)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            make_config("huge")

    def test_parse(self):
        cfg = parse_config("profile = desk\n# comment\nseed = 7\nuse_attention = false\n"
                           "background = 1, 1, 1\nlr_hash = 0.02  # inline\n")
        assert cfg.seed == 7 and not cfg.use_attention
        assert cfg.background == (1.0, 1.0, 1.0) and cfg.lr_hash == 0.02

    def test_round_trip_text(self):
        cfg = make_config("desk", seed=3, use_offset_pool=False)
        assert parse_config(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text,line,word", [
        ("seed = 1\nbogus = 2\n", 2, "unknown"),
        ("seed = 1\nseed = 2\n", 2, "duplicate"),
        ("\n\nseed = x\n", 3, "cannot parse"),
        ("seed 1\n", 1, "expected"),
        ("use_attention = maybe\n", 1, "cannot parse"),
    ])
    def test_errors_carry_line_numbers(self, text, line, word):
        with pytest.raises(ConfigError) as e:
            parse_config(text, "run.cfg")
        assert f"run.cfg:{line}:" in str(e.value) and word in str(e.value)

    def test_validation(self):
        with pytest.raises(ConfigError):
            make_config("desk", sh_degree=4)
        with pytest.raises(ConfigError):
            make_config("desk", iterations_coarse=-1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_defaults_type(self):
        assert isinstance(RunConfig().background, tuple)
