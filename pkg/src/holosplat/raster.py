"""Differentiable tile-based Gaussian splatting.

Forward: project Gaussians (EWA local affine approximation), bin them into
16x16 pixel tiles, composite front to back in global depth order. Backward:
exact reverse of the compositing recurrence, chained through the projection
to means, quaternions, scales, opacities and colours.

Tiles are processed in padded batches so the per-pixel work is vectorized;
a padded slot points at a dummy splat with zero opacity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from holosplat.scene import (Camera, ViewGaussians, covariance_from_scales,
                             covariance_from_scales_backward)

TILE = 16
LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
# elements per padded batch (tiles * pixels * splats)
_CHUNK_ELEMS = 1 << 21


@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source: int


@dataclass
class Projected:
    """Screen-space splats for one view; rows follow the input Gaussians."""

    centers: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray        # (N, 2, 2) including the low-pass floor
    conics: np.ndarray       # (N, 3) packed inverse covariance (a, b, c)
    depths: np.ndarray       # (N,) camera-space z
    colors: np.ndarray       # (N, 3)
    opacities: np.ndarray    # (N,)
    valid: np.ndarray        # (N,) bool, False when culled by near/far
    _cache: tuple = ()

    def __len__(self) -> int:
        return len(self.centers)

    def splat(self, i: int) -> Splat2D | None:
        if not self.valid[i]:
            return None
        return Splat2D(self.centers[i], self.cov2d[i], float(self.depths[i]), self.colors[i],
                       float(self.opacities[i]), i)


@dataclass
class ProjectedGrads:
    centers: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray            # (H, W, 3)
    alpha: np.ndarray            # (H, W)
    depth: np.ndarray | None     # (H, W) alpha-weighted expected depth, unnormalized
    n_contrib: np.ndarray        # (H, W) int


# ----------------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------------

def _cam_arrays(cam: Camera, dt):
    return cam.rotation.astype(dt), cam.translation.astype(dt)


def project(vg: ViewGaussians, cam: Camera) -> Projected:
    """Camera-space transform, perspective projection and 2D covariance J W Sigma W^T J^T."""
    dt = vg.means.dtype
    Rw, tw = _cam_arrays(cam, dt)
    t = vg.means @ Rw.T + tw
    z = t[:, 2]
    valid = (z >= cam.near) & (z <= cam.far)
    zs = np.where(valid, z, 1.0).astype(dt)
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)
    centers = np.stack([fx * t[:, 0] / zs + dt.type(cam.cx), fy * t[:, 1] / zs + dt.type(cam.cy)], axis=1)
    n = len(vg)
    J = np.zeros((n, 2, 3), dtype=dt)
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t[:, 1] / zs**2
    sigma = covariance_from_scales(vg.quats, vg.scales)
    T = J @ Rw
    cov2d = T @ sigma @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    valid &= det > 0
    det = np.where(valid, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    return Projected(centers, cov2d, conics, z, vg.colors, vg.opacities, valid,
                     (t, zs, J, T, sigma))


def project_one(g, cam: Camera) -> Splat2D | None:
    """Project a single activated Gaussian record; ``None`` when culled."""
    vg = ViewGaussians(np.atleast_2d(g.means), np.atleast_2d(g.quats), np.atleast_2d(g.scales),
                       np.atleast_1d(g.opacities), np.atleast_2d(g.colors))
    return project(vg, cam).splat(0)


def project_backward(vg: ViewGaussians, proj: Projected, cam: Camera,
                     grads: ProjectedGrads) -> ViewGaussians:
    """Chain screen-space gradients back to the activated Gaussian parameters."""
    dt = vg.means.dtype
    t, zs, J, T, sigma = proj._cache
    Rw, _ = _cam_arrays(cam, dt)
    m = proj.valid
    # conic = inverse(cov2d); dcov = -A G A with G the gradient w.r.t. the full conic matrix
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    A = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    ga, gb, gc = grads.conics[:, 0], grads.conics[:, 1], grads.conics[:, 2]
    G = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc], -1)], -2)
    dcov = -A @ G @ A
    dcov[~m] = 0
    dsigma = np.swapaxes(T, 1, 2) @ dcov @ T
    dT = (dcov + np.swapaxes(dcov, 1, 2)) @ T @ sigma
    dJ = dT @ Rw.T
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)
    x, y = t[:, 0], t[:, 1]
    du, dv = grads.centers[:, 0] * m, grads.centers[:, 1] * m
    dtc = np.zeros_like(t)
    dtc[:, 0] = du * fx / zs - dJ[:, 0, 2] * fx / zs**2
    dtc[:, 1] = dv * fy / zs - dJ[:, 1, 2] * fy / zs**2
    dtc[:, 2] = (-du * fx * x / zs**2 - dv * fy * y / zs**2
                 - dJ[:, 0, 0] * fx / zs**2 + 2 * dJ[:, 0, 2] * fx * x / zs**3
                 - dJ[:, 1, 1] * fy / zs**2 + 2 * dJ[:, 1, 2] * fy * y / zs**3
                 + grads.depths * m)
    dmeans = dtc @ Rw
    dquats, dscales = covariance_from_scales_backward(vg.quats, vg.scales, dsigma)
    return ViewGaussians(dmeans, dquats, dscales, grads.opacities * m, grads.colors * m[:, None])


# ----------------------------------------------------------------------------
# tile binning
# ----------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _tile_pixels(height: int, width: int, dtname: str):
    """Pixel-centre coordinates (n_tiles, TILE*TILE, 2), row/col indices and in-image mask."""
    ty, tx = -(-height // TILE), -(-width // TILE)
    ly, lx = np.meshgrid(np.arange(TILE), np.arange(TILE), indexing="ij")
    ly, lx = ly.ravel(), lx.ravel()
    tiles_y, tiles_x = np.meshgrid(np.arange(ty), np.arange(tx), indexing="ij")
    rows = tiles_y.ravel()[:, None] * TILE + ly[None]
    cols = tiles_x.ravel()[:, None] * TILE + lx[None]
    inside = (rows < height) & (cols < width)
    pix = np.stack([cols + 0.5, rows + 0.5], axis=-1).astype(dtname)
    return pix, rows, cols, inside, ty, tx


def splat_extents(proj: Projected):
    """Half-widths (N, 2) of the box outside which a splat's alpha is below 1/255.

    Exact for the ellipse o * exp(-0.5 d^T A d) = 1/255, so tile culling drops
    nothing the compositor would keep.
    """
    o = proj.opacities.astype(np.float64)
    q = 2.0 * np.log(np.maximum(o, 1e-30) * 255.0)
    q = np.where(proj.valid & (o >= ALPHA_MIN), np.maximum(q, 0.0), -1.0)
    cov = proj.cov2d.astype(np.float64)
    hx = np.sqrt(np.maximum(q, 0.0) * cov[:, 0, 0])
    hy = np.sqrt(np.maximum(q, 0.0) * cov[:, 1, 1])
    return np.stack([hx, hy], axis=1), q >= 0


def bin_tiles(proj: Projected, height: int, width: int):
    """Per-tile splat lists in global front-to-back order.

    Returns (order, tile_starts) where ``order`` lists splat indices grouped
    by tile and sorted by (depth, index) within each tile.
    """
    n_ty, n_tx = -(-height // TILE), -(-width // TILE)
    ext, live = splat_extents(proj)
    c = proj.centers.astype(np.float64)
    slack = 1e-4 * (1.0 + ext)
    # pixel j is covered when |j + 0.5 - u| <= hx
    j0 = np.ceil(c[:, 0] - ext[:, 0] - slack[:, 0] - 0.5)
    j1 = np.floor(c[:, 0] + ext[:, 0] + slack[:, 0] - 0.5)
    i0 = np.ceil(c[:, 1] - ext[:, 1] - slack[:, 1] - 0.5)
    i1 = np.floor(c[:, 1] + ext[:, 1] + slack[:, 1] - 0.5)
    live &= (j1 >= 0) & (j0 <= width - 1) & (i1 >= 0) & (i0 <= height - 1)
    live &= np.isfinite(c).all(axis=1)
    idx = np.flatnonzero(live)
    tx0 = (np.clip(j0[idx], 0, width - 1) // TILE).astype(np.int64)
    tx1 = (np.clip(j1[idx], 0, width - 1) // TILE).astype(np.int64)
    ty0 = (np.clip(i0[idx], 0, height - 1) // TILE).astype(np.int64)
    ty1 = (np.clip(i1[idx], 0, height - 1) // TILE).astype(np.int64)
    wt = tx1 - tx0 + 1
    counts = wt * (ty1 - ty0 + 1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    off = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[owner] + off // wt[owner]) * n_tx + tx0[owner] + off % wt[owner]
    splat = idx[owner]
    # global depth rank, ties broken by source index
    rank = np.empty(len(proj), dtype=np.int64)
    rank[np.lexsort((np.arange(len(proj)), proj.depths))] = np.arange(len(proj))
    perm = np.lexsort((rank[splat], tile))
    tile, splat = tile[perm], splat[perm]
    starts = np.searchsorted(tile, np.arange(n_ty * n_tx + 1))
    return splat, starts


# ----------------------------------------------------------------------------
# compositing
# ----------------------------------------------------------------------------

def _padded_lists(splat, starts, tiles, dummy):
    counts = starts[tiles + 1] - starts[tiles]
    kmax = max(int(counts.max()) if len(counts) else 0, 1)
    lists = np.full((len(tiles), kmax), dummy, dtype=np.int64)
    pos = np.arange(kmax)[None, :]
    valid = pos < counts[:, None]
    src = starts[tiles][:, None] + pos
    lists[valid] = splat[src[valid]]
    return lists


def _composite(pix, lists, ext_c, ext_conic, ext_o, ext_col, ext_z, bg, with_depth=True):
    """Front-to-back compositing for a batch of tiles. Returns outputs and intermediates."""
    d = pix[:, :, None, :] - ext_c[lists][:, None, :, :]
    con = ext_conic[lists][:, None]
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (con[..., 0] * dx * dx + con[..., 2] * dy * dy) - con[..., 1] * dx * dy
    g = np.exp(np.minimum(power, 0.0))
    araw = ext_o[lists][:, None, :] * g
    keep = (araw >= ALPHA_MIN) & (power <= 0)
    alpha = np.where(keep, np.minimum(araw, ALPHA_MAX), 0.0).astype(pix.dtype)
    one_minus = 1.0 - alpha
    cp = np.cumprod(one_minus, axis=-1)
    T = np.concatenate([np.ones_like(cp[..., :1]), cp[..., :-1]], axis=-1)
    t_final = cp[..., -1]
    w = alpha * T
    col = ext_col[lists]
    color = np.matmul(w, col) + t_final[..., None] * bg
    depth = np.matmul(w, ext_z[lists][..., None])[..., 0] if with_depth else None
    return color, depth, t_final, keep, (d, g, araw, alpha, T, w)


@dataclass
class RenderCache:
    proj: Projected
    height: int
    width: int
    background: np.ndarray
    batches: list
    n_tiles: int
    touched: np.ndarray     # splats binned into at least one tile


def _extended(proj: Projected):
    dt = proj.centers.dtype
    n = len(proj)
    c = np.concatenate([np.where(proj.valid[:, None], proj.centers, 0), np.zeros((1, 2), dt)])
    con = np.concatenate([np.where(proj.valid[:, None], proj.conics, 0), np.zeros((1, 3), dt)])
    o = np.concatenate([np.where(proj.valid, proj.opacities, 0), np.zeros(1, dt)])
    col = np.concatenate([proj.colors, np.zeros((1, 3), dt)])
    z = np.concatenate([np.where(proj.valid, proj.depths, 0), np.zeros(1, dt)])
    return n, c, con, o, col, z


def render(proj: Projected, cam: Camera, background=(0.0, 0.0, 0.0), *,
           with_depth: bool = False, keep_cache: bool = True):
    """Composite projected splats into an image.

    Returns (RenderOutput, RenderCache); the cache feeds ``render_backward``.
    """
    dt = proj.centers.dtype
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=dt)
    pix, rows, cols, inside, n_ty, n_tx = _tile_pixels(H, W, dt.name)
    splat, starts = bin_tiles(proj, H, W)
    n, ext_c, ext_con, ext_o, ext_col, ext_z = _extended(proj)
    n_tiles = n_ty * n_tx
    counts = np.diff(starts)
    color = np.empty((n_tiles, TILE * TILE, 3), dt)
    depth = np.zeros((n_tiles, TILE * TILE), dt)
    alpha = np.zeros((n_tiles, TILE * TILE), dt)
    ncon = np.zeros((n_tiles, TILE * TILE), np.int64)
    batches = []
    empty = np.flatnonzero(counts == 0)
    color[empty] = bg
    busy = np.flatnonzero(counts > 0)
    # group tiles by list length so padding stays small
    busy = busy[np.argsort(counts[busy], kind="stable")]
    i = 0
    while i < len(busy):
        j = i + 1
        while j < len(busy) and j - i < max(1, _CHUNK_ELEMS // (TILE * TILE * max(counts[busy[j]], 1))):
            j += 1
        tiles = busy[i:j]
        lists = _padded_lists(splat, starts, tiles, n)
        c, dd, tf, keep, inter = _composite(pix[tiles], lists, ext_c, ext_con, ext_o, ext_col, ext_z, bg,
                                            with_depth)
        color[tiles], alpha[tiles] = c, 1.0 - tf
        if with_depth:
            depth[tiles] = dd
        ncon[tiles] = keep.sum(-1)
        if keep_cache:
            batches.append((tiles, lists, tf, keep, inter))
        i = j
    img = np.empty((H, W, 3), dt)
    img[rows[inside], cols[inside]] = color[inside]
    a_img = np.zeros((H, W), dt)
    a_img[rows[inside], cols[inside]] = alpha[inside]
    n_img = np.zeros((H, W), np.int64)
    n_img[rows[inside], cols[inside]] = ncon[inside]
    d_img = None
    if with_depth:
        d_img = np.zeros((H, W), dt)
        d_img[rows[inside], cols[inside]] = depth[inside]
    out = RenderOutput(img, a_img, d_img, n_img)
    touched = np.bincount(splat, minlength=n) > 0
    return out, RenderCache(proj, H, W, bg, batches, n_tiles, touched)


def render_backward(cache: RenderCache, dcolor, ddepth=None, dalpha=None) -> ProjectedGrads:
    """Gradients of a scalar loss w.r.t. every screen-space splat field."""
    proj = cache.proj
    dt = proj.centers.dtype
    pix, rows, cols, inside, _, _ = _tile_pixels(cache.height, cache.width, dt.name)
    n, ext_c, ext_con, ext_o, ext_col, ext_z = _extended(proj)

    def to_tiles(img, shape):
        out = np.zeros(shape, dt)
        if img is not None:
            out[inside] = np.asarray(img, dtype=dt)[rows[inside], cols[inside]]
        return out

    gC_all = to_tiles(dcolor, (cache.n_tiles, TILE * TILE, 3))
    gD_all = to_tiles(ddepth, (cache.n_tiles, TILE * TILE))
    gA_all = to_tiles(dalpha, (cache.n_tiles, TILE * TILE))
    m = n + 1
    acc = {k: np.zeros(m * s, np.float64) for k, s in
           (("c", 2), ("con", 3), ("z", 1), ("col", 3), ("o", 1))}
    bg = cache.background
    for tiles, lists, tf, keep, (d, g, araw, alpha, T, w) in cache.batches:
        gC, gD, gA = gC_all[tiles], gD_all[tiles], gA_all[tiles]
        col = ext_col[lists]
        e = np.matmul(gC, col.transpose(0, 2, 1))
        if ddepth is not None:
            e += gD[..., None] * ext_z[lists][:, None, :]
        ew = e * w
        suffix = ew.sum(-1, keepdims=True) - np.cumsum(ew, axis=-1)
        tail = ((gC @ bg) - gA)[..., None] * tf[..., None]
        dalpha_ = e * T - (suffix + tail) / (1.0 - alpha)
        daraw = np.where(keep & (araw <= ALPHA_MAX), dalpha_, 0.0)
        do = np.sum(daraw * g, axis=1)
        dpow = daraw * araw
        con = ext_con[lists][:, None]
        dx, dy = d[..., 0], d[..., 1]
        dcx = np.sum(dpow * (con[..., 0] * dx + con[..., 1] * dy), axis=1)
        dcy = np.sum(dpow * (con[..., 1] * dx + con[..., 2] * dy), axis=1)
        dca = np.sum(-0.5 * dx * dx * dpow, axis=1)
        dcb = np.sum(-dx * dy * dpow, axis=1)
        dcc = np.sum(-0.5 * dy * dy * dpow, axis=1)
        wt = w.transpose(0, 2, 1)
        dcol = np.matmul(wt, gC)
        dz = np.matmul(wt, gD[..., None])[..., 0] if ddepth is not None else np.zeros(lists.shape, dt)
        flat = lists.ravel()
        for key, vals in (("c", (dcx, dcy)), ("con", (dca, dcb, dcc)), ("z", (dz,)),
                          ("col", tuple(dcol[..., i] for i in range(3))), ("o", (do,))):
            s = len(vals)
            for comp, v in enumerate(vals):
                acc[key][comp * m:(comp + 1) * m] += np.bincount(flat, weights=v.ravel(), minlength=m)

    def unpack(key, s):
        a = acc[key].reshape(s, m)[:, :n].T.astype(dt)
        return a if s > 1 else a[:, 0]

    return ProjectedGrads(unpack("c", 2), unpack("con", 3), unpack("z", 1), unpack("col", 3),
                          unpack("o", 1))


# ----------------------------------------------------------------------------
# convenience wrappers
# ----------------------------------------------------------------------------

def rasterize(vg: ViewGaussians, cam: Camera, background=(0.0, 0.0, 0.0), *, with_depth=False,
              keep_cache=True):
    proj = project(vg, cam)
    out, cache = render(proj, cam, background, with_depth=with_depth, keep_cache=keep_cache)
    return out, cache


def rasterize_backward(vg: ViewGaussians, cam: Camera, cache: RenderCache, dcolor, ddepth=None,
                       dalpha=None):
    """Returns (ViewGaussians gradients, pixel-space centre gradients)."""
    pg = render_backward(cache, dcolor, ddepth, dalpha)
    return project_backward(vg, cache.proj, cam, pg), pg.centers
