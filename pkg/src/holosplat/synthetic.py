"""Procedural aerial-style scenes with ground-truth Gaussians, for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosplat import sh as _sh
from holosplat.raster import rasterize
from holosplat.scene import Camera, GaussianSet, activate


@dataclass
class SyntheticScene:
    gaussians: GaussianSet          # ground truth, float64
    cameras: list
    background: tuple
    seed_points: np.ndarray
    seed_colors: np.ndarray
    seam_x: float = 0.0             # block boundary used by the divide-and-conquer baseline

    def render_images(self) -> list[np.ndarray]:
        return [render_gt(self.gaussians, cam, self.background) for cam in self.cameras]


def render_gt(gaussians: GaussianSet, cam: Camera, background) -> np.ndarray:
    vg, _ = activate(gaussians.astype(np.float64), cam.center)
    out, _ = rasterize(vg, cam, background, keep_cache=False)
    return out.color


def make_scene(n_gaussians: int = 48, n_views: int = 16, size: int = 64, seed: int = 0, *,
               n_detail: int | None = None, extent=(2.0, 1.0), height: float = 1.8,
               fov_deg: float = 60.0, background=(0.0, 0.0, 0.0), seeds_per_gaussian: int = 2,
               seed_jitter: float = 0.04) -> SyntheticScene:
    """A strip of flattened ground Gaussians seen by drone-like cameras.

    Most Gaussians are broad ground patches; ``n_detail`` small ones add
    high-frequency content. Cameras fly two rows along x, tilted towards the
    strip, so each view sees only part of the scene.
    """
    rng = np.random.default_rng(seed)
    ex, ey = extent
    n_detail = n_gaussians // 4 if n_detail is None else n_detail
    n_big = n_gaussians - n_detail
    means = np.column_stack([rng.uniform(-ex, ex, n_gaussians), rng.uniform(-ey, ey, n_gaussians),
                             rng.uniform(-0.05, 0.05, n_gaussians)])
    scales = np.empty((n_gaussians, 3))
    scales[:n_big, :2] = rng.uniform(0.15, 0.35, (n_big, 2))
    scales[n_big:, :2] = rng.uniform(0.03, 0.06, (n_detail, 2))
    scales[:, 2] = rng.uniform(0.02, 0.04, n_gaussians)
    # mostly-flat orientation: small tilt plus a free spin about z
    yaw = rng.uniform(0, np.pi, n_gaussians)
    tilt = rng.normal(0, 0.15, (n_gaussians, 2))
    quats = np.column_stack([np.cos(yaw / 2), tilt[:, 0], tilt[:, 1], np.sin(yaw / 2)])
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.05, 0.95, (n_gaussians, 3))
    opac = rng.uniform(0.8, 0.98, n_gaussians)
    sh = np.zeros((n_gaussians, 1, 3))
    sh[:, 0] = _sh.rgb_to_dc(colors)
    gt = GaussianSet(means, quats, np.log(scales), np.log(opac / (1 - opac)), sh)

    cams = []
    n_rows = 2
    per_row = -(-n_views // n_rows)
    xs = np.linspace(-ex * 1.05, ex * 1.05, per_row)
    for r in range(n_rows):
        yc = (-1) ** r * ey * 1.3
        for i, x in enumerate(xs):
            if len(cams) == n_views:
                break
            eye = np.array([x + rng.normal(0, 0.05), yc, height + rng.normal(0, 0.05)])
            target = np.array([x * 0.85, -yc * 0.25, 0.0])
            cams.append(Camera.look_at(eye, target, up=(0, 0, 1), fov_deg=fov_deg, width=size,
                                       height=size, near=0.05, far=20.0, name=f"view_{len(cams):03d}"))

    pts = np.repeat(means, seeds_per_gaussian, axis=0) + rng.normal(0, seed_jitter,
                                                                      (n_gaussians * seeds_per_gaussian, 3))
    cols = np.clip(np.repeat(colors, seeds_per_gaussian, axis=0)
                   + rng.normal(0, 0.05, (len(pts), 3)), 0, 1)
    return SyntheticScene(gt, cams, tuple(float(b) for b in background), pts, cols)
