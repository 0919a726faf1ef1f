"""Random scenes and cameras shared by the unit tests."""

import numpy as np

from holosplat.scene import Camera, GaussianSet


def random_set(rng, n, degree=0, dtype=np.float64, spread=1.0, log_scale=(-2.5, -1.0)):
    return GaussianSet(rng.normal(0, spread, (n, 3)), rng.normal(size=(n, 4)),
                       rng.uniform(*log_scale, (n, 3)), rng.normal(1.0, 1.0, n),
                       rng.normal(0, 0.5, (n, (degree + 1) ** 2, 3))).astype(dtype)


def random_camera(rng, size=32, dist=3.0):
    d = np.array([0, 0, 1.0])
    while abs(d[2]) > 0.9:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
    target = rng.normal(0, 0.2, 3)
    return Camera.look_at(target + dist * d, target, fov_deg=rng.uniform(40, 70), width=size,
                          height=size)


def front_camera(size=32, dist=3.0):
    return Camera.look_at([0, 0, -dist], [0, 0, 0], (0, -1, 0), fov_deg=60, width=size, height=size)


def small_phi(coarse, seed=0, **overrides):
    """Float64 implicit parameters with small nets, frozen against ``coarse``."""
    from holosplat.config import make_config
    from holosplat.model import init_phi, freeze_coarse

    kw = dict(hash_levels=3, hash_min_res=2, hash_max_res=8, hash_log2_table_size=6, mlp_width=8,
              feature_width=4, hash_init_range=0.5)
    kw.update(overrides)
    cfg = make_config("desk", **kw)
    phi = init_phi(cfg, coarse, np.random.default_rng(seed), np.float64)
    freeze_coarse(phi, coarse, cfg)
    return cfg, phi


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []
