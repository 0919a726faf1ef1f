"""Training loss (L1 + lambda * (1 - SSIM)) and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")


def l1_loss(pred, gt):
    """Mean absolute error and its subgradient sign(pred - gt) / count."""
    _check_shapes(pred, gt)
    diff = pred - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img, win):
    # separable window over the two spatial axes, edges replicated
    out = correlate1d(img, win, axis=0, mode="nearest")
    return correlate1d(out, win, axis=1, mode="nearest")


def _blur_1d_adjoint(y, win, axis):
    r = len(win) // 2
    n = y.shape[axis]
    pad = [(0, 0)] * y.ndim
    pad[axis] = (r, r)
    full = correlate1d(np.pad(y, pad), win[::-1], axis=axis, mode="constant")
    core = np.take(full, np.arange(r, r + n), axis=axis).copy()
    # fold the replicated border back onto the edge samples
    left = np.take(full, np.arange(0, r), axis=axis).sum(axis=axis)
    right = np.take(full, np.arange(r + n, n + 2 * r), axis=axis).sum(axis=axis)
    idx0 = [slice(None)] * y.ndim
    idx0[axis] = 0
    core[tuple(idx0)] += left
    idx0[axis] = n - 1
    core[tuple(idx0)] += right
    return core


def _blur_adjoint(y, win):
    return _blur_1d_adjoint(_blur_1d_adjoint(y, win, 1), win, 0)


def ssim(pred, gt, *, window: int = 11, sigma: float = 1.5, with_grad: bool = False):
    """Mean windowed SSIM over (H, W, C) images; optional gradient w.r.t. ``pred``."""
    _check_shapes(pred, gt)
    x = np.asarray(pred)
    y = np.asarray(gt)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    win = gaussian_window(window, sigma).astype(x.dtype)
    mx, my = _blur(x, win), _blur(y, win)
    mxx, myy, mxy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    a1 = 2 * mx * my + SSIM_C1
    b1 = mx * mx + my * my + SSIM_C1
    a2 = 2 * (mxy - mx * my) + SSIM_C2
    b2 = (mxx - mx * mx) + (myy - my * my) + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))
    if not with_grad:
        return value
    g = 1.0 / smap.size
    d_mx = g * smap * (2 * my / a1 - 2 * mx / b1 - 2 * my / a2 + 2 * mx / b2)
    d_mxx = -g * smap / b2
    d_mxy = g * smap * 2 / a2
    grad = _blur_adjoint(d_mx, win) + 2 * x * _blur_adjoint(d_mxx, win) + y * _blur_adjoint(d_mxy, win)
    return value, grad.reshape(np.shape(pred))


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) in dB; +inf for identical images."""
    _check_shapes(pred, gt)
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


@dataclass
class LossBreakdown:
    l1: float
    ssim: float
    total: float
    lam: float


def total_loss(pred, gt, lam: float = 0.2):
    """L1 + lam * (1 - SSIM); returns (LossBreakdown, gradient w.r.t. pred)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l1, g1 = l1_loss(pred, gt)
    s, gs = ssim(pred, gt, with_grad=True)
    total = l1 + lam * (1 - s)
    return LossBreakdown(l1, s, total, lam), (g1 - lam * gs).astype(np.asarray(pred).dtype)


def seam_mask(cam, axis: int, value: float, box, band_px: float = 2.0, samples: int = 256) -> np.ndarray:
    """Pixels within ``band_px`` of the image of the plane x[axis] = value, clipped to ``box``.

    ``box`` is a (2, 3) min/max array bounding the scene; the plane patch inside
    it is sampled on a grid, projected, and dilated by the band.
    """
    from scipy.spatial import cKDTree

    box = np.asarray(box, np.float64)
    others = [a for a in range(3) if a != axis]
    u = np.linspace(box[0, others[0]], box[1, others[0]], samples)
    v = np.linspace(box[0, others[1]], box[1, others[1]], max(2, samples // 8))
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.zeros((uu.size, 3))
    pts[:, axis] = value
    pts[:, others[0]], pts[:, others[1]] = uu.ravel(), vv.ravel()
    pc = cam.world_to_camera(pts)
    front = pc[:, 2] > cam.near
    if not front.any():
        return np.zeros((cam.height, cam.width), bool)
    pc = pc[front]
    px = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    tree = cKDTree(px)
    jj, ii = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d, _ = tree.query(np.stack([jj.ravel(), ii.ravel()], axis=1))
    return (d <= band_px).reshape(cam.height, cam.width)


def seam_gradient(pred, gt, mask) -> float:
    """Mean image-gradient magnitude of the residual (pred - gt) over masked pixels.

    Taking the residual removes edges that exist in the ground truth, so what
    remains near the seam is reconstruction discontinuity.
    """
    r = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    gx = np.zeros(r.shape[:2])
    gy = np.zeros(r.shape[:2])
    gx[:, :-1] = np.abs(np.diff(r, axis=1)).mean(-1)
    gy[:-1, :] = np.abs(np.diff(r, axis=0)).mean(-1)
    g = np.hypot(gx, gy)
    return float(g[mask].mean()) if mask.any() else float("nan")
