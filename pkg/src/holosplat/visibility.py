"""Frustum and opacity filtering of the coarse Gaussians for one camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosplat.raster import project
from holosplat.scene import Camera, GaussianSet, ViewGaussians


@dataclass
class VisibilityConfig:
    opacity_threshold: float = 0.005
    margin_scale: float = 3.0
    margin_cap_px: float = 64.0


@dataclass(frozen=True)
class VisibleSelection:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or (len(idx) > 1 and np.any(np.diff(idx) <= 0)):
            raise ValueError("selection indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def select_visible(coarse: GaussianSet, cam: Camera, cfg: VisibilityConfig | None = None) -> VisibleSelection:
    """Indices whose centre depth is within [near, far], whose projected centre lies in
    the image dilated by a footprint margin, and whose opacity exceeds the threshold."""
    cfg = cfg or VisibilityConfig()
    if len(coarse) == 0:
        raise ValueError("empty Gaussian set")
    g = coarse.astype(np.float64)
    opac = 1.0 / (1.0 + np.exp(-g.opacity_logits))
    vg = ViewGaussians(g.means, g.quats, np.exp(g.log_scales), opac, np.zeros((len(g), 3)))
    p = project(vg, cam)
    in_depth = (p.depths >= cam.near) & (p.depths <= cam.far)
    sigma = np.sqrt(np.linalg.eigvalsh(p.cov2d)[:, -1])
    m = np.minimum(cfg.margin_scale * sigma, cfg.margin_cap_px)
    u, v = p.centers[:, 0], p.centers[:, 1]
    in_rect = (u >= -m) & (u <= cam.width + m) & (v >= -m) & (v <= cam.height + m)
    keep = in_depth & in_rect & (opac > cfg.opacity_threshold)
    return VisibleSelection(np.flatnonzero(keep))


def _check(coarse_len: int, sel: VisibleSelection):
    if sel.count and (sel.indices[0] < 0 or sel.indices[-1] >= coarse_len):
        raise IndexError("selection index out of range")


def gather(coarse: GaussianSet, sel: VisibleSelection) -> GaussianSet:
    _check(len(coarse), sel)
    return coarse.take(sel.indices)


def gather_backward(grad: GaussianSet, sel: VisibleSelection, n: int) -> GaussianSet:
    """Scatter-add gradients of the gathered rows back to a full-size set."""
    out = GaussianSet.zeros(n, grad.sh_degree, grad.dtype)
    for name, arr in grad.arrays().items():
        np.add.at(out.arrays()[name], sel.indices, arr)
    return out
