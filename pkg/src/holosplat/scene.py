"""Explicit Gaussian scene primitives, covariance construction and colour evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from holosplat import sh as _sh


class DomainError(ValueError):
    """Raised when numeric inputs fall outside the domain of an operation."""


# ----------------------------------------------------------------------------
# quaternions and covariance
# ----------------------------------------------------------------------------

def normalize_quats(q):
    q = np.asarray(q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The quaternions are normalized first.
    """
    u = normalize_quats(q)
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    R = np.empty(u.shape[:-1] + (3, 3), dtype=u.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR):
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    q = np.asarray(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    G = dR
    du = np.empty_like(u)
    du[..., 0] = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
                      - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    du[..., 1] = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
                      - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
                      + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    du[..., 2] = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
                      + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
                      + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    du[..., 3] = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
                      + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
                      + x * G[..., 2, 0] + y * G[..., 2, 1])
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / n


def rotmat_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def covariance_from_scales(quats, scales):
    """Batched R S S^T R^T for (N, 4) quaternions and (N, 3) positive scales."""
    M = quat_to_rotmat(quats) * scales[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_from_scales_backward(quats, scales, dcov):
    """Returns (dquats, dscales) given dL/dSigma of shape (N, 3, 3)."""
    R = quat_to_rotmat(quats)
    M = R * scales[..., None, :]
    dM = (dcov + np.swapaxes(dcov, -1, -2)) @ M
    dscales = np.sum(dM * R, axis=-2)
    dR = dM * scales[..., None, :]
    return quat_to_rotmat_backward(quats, dR), dscales


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input")


def build_covariance(rot, log_scale):
    """Covariance R S S^T R^T with S = diag(exp(log_scale)); rot is normalized here."""
    rot = np.asarray(rot, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    _check_finite(rot, log_scale)
    if np.linalg.norm(rot) == 0:
        raise DomainError("zero quaternion")
    return covariance_from_scales(rot[None], np.exp(log_scale)[None])[0]


def build_covariance_backward(rot, log_scale, dcov):
    """Gradients (drot, dlog_scale) of a scalar loss through build_covariance."""
    rot = np.asarray(rot, dtype=np.float64)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    dq, ds = covariance_from_scales_backward(rot[None], s[None], np.asarray(dcov)[None])
    return dq[0], ds[0] * s


# ----------------------------------------------------------------------------
# containers
# ----------------------------------------------------------------------------

def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Gaussian:
    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray  # (K, 3) SH coefficients

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(len(self.color)))) - 1


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian scene.

    ``sh`` has shape (N, (D+1)**2, 3). The same container is used to carry
    gradients, so no activation is applied on construction.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        n = len(self.means)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ValueError(f"field {f.name} has length {len(getattr(self, f.name))}, expected {n}")
        k = self.sh.shape[1] if self.sh.ndim == 3 else -1
        if self.sh.ndim != 3 or self.sh.shape[2] != 3 or int(round(np.sqrt(k))) ** 2 != k:
            raise ValueError(f"bad SH shape {self.sh.shape}")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def dtype(self):
        return self.means.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> GaussianSet:
        return GaussianSet(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> GaussianSet:
        return GaussianSet(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def take(self, idx) -> GaussianSet:
        return GaussianSet(**{k: v[idx] for k, v in self.arrays().items()})

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.quats[i], self.log_scales[i],
                        float(self.opacity_logits[i]), self.sh[i])

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float32) -> GaussianSet:
        return cls.zeros(0, sh_degree, dtype)

    @classmethod
    def zeros(cls, n: int, sh_degree: int = 0, dtype=np.float32) -> GaussianSet:
        return cls(np.zeros((n, 3), dtype), np.zeros((n, 4), dtype), np.zeros((n, 3), dtype),
                   np.zeros(n, dtype), np.zeros((n, sh_coeff_count(sh_degree), 3), dtype))

    def zeros_like(self) -> GaussianSet:
        return GaussianSet(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    @classmethod
    def concat(cls, sets) -> GaussianSet:
        sets = list(sets)
        return cls(**{k: np.concatenate([s.arrays()[k] for s in sets]) for k in sets[0].arrays()})

    @classmethod
    def from_points(cls, points, colors, sh_degree: int = 0, init_opacity: float = 0.1,
                    dtype=np.float32) -> GaussianSet:
        """Isotropic Gaussians at seed points, sized by nearest-neighbour spacing."""
        from scipy.spatial import cKDTree

        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if n == 0:
            raise ValueError("no seed points")
        if n > 1:
            k = min(4, n)
            d, _ = cKDTree(points).query(points, k=k)
            dist2 = np.mean(d[:, 1:] ** 2, axis=1)
        else:
            dist2 = np.ones(1)
        dist2 = np.maximum(dist2, 1e-7)
        sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
        sh[:, 0, :] = _sh.rgb_to_dc(np.asarray(colors, dtype=np.float64))
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        return cls(points, quats, np.repeat(np.log(np.sqrt(dist2))[:, None], 3, axis=1),
                   np.full(n, np.log(init_opacity / (1 - init_opacity))), sh).astype(dtype)


@dataclass
class ViewGaussians:
    """Activated, per-view Gaussians as consumed by the rasterizer.

    Colours are plain RGB (already evaluated for the view); quaternions may be
    unnormalized; scales and opacities are activated.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.means)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self) -> ViewGaussians:
        return ViewGaussians(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def take(self, idx) -> ViewGaussians:
        return ViewGaussians(**{k: v[idx] for k, v in self.arrays().items()})

    @classmethod
    def empty(cls, dtype=np.float32) -> ViewGaussians:
        return cls(np.zeros((0, 3), dtype), np.zeros((0, 4), dtype), np.zeros((0, 3), dtype),
                   np.zeros(0, dtype), np.zeros((0, 3), dtype))


# ----------------------------------------------------------------------------
# camera
# ----------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (x_cam = R x + t).

    Camera space follows the COLMAP convention: +z forward, +x right, +y down.
    Pixel (row i, col j) has its centre at (j + 0.5, i + 0.5).
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not 0 < self.near < self.far:
            raise ValueError(f"invalid clip range near={self.near} far={self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, x):
        return np.asarray(x) @ self.rotation.T.astype(np.asarray(x).dtype) + self.translation.astype(np.asarray(x).dtype)

    def scaled(self, factor: float) -> Camera:
        """Intrinsics and resolution divided by ``factor`` (image downsampling).

        The resolution is rounded to whole pixels and the intrinsics follow the
        actual per-axis size ratio, so cx/width and cy/height are preserved.
        """
        w = max(1, int(round(self.width / factor)))
        h = max(1, int(round(self.height / factor)))
        sx, sy = w / self.width, h / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
                       width=w, height=h)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg: float = 60.0, width: int = 64,
                height: int = 64, near: float = 0.01, far: float = 100.0, name: str = "") -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(R, -R @ eye, f, f, width / 2, height / 2, width, height, near, far, name)


def eval_gaussian(g: Gaussian, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 d^T Sigma^-1 d) at x."""
    return _eval_gaussian(g, x)[0]


def _regularized_cov(g: Gaussian):
    cov = build_covariance(g.rot, g.log_scale)
    eps = 1e-9 * np.trace(cov)
    reg = cov + eps * np.eye(3)
    if not np.all(np.isfinite(reg)) or np.linalg.eigvalsh(reg)[0] <= 0:
        raise DomainError("degenerate covariance")
    return cov, reg


def _eval_gaussian(g: Gaussian, x):
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(g.mu, dtype=np.float64)
    _check_finite(x, mu)
    _, reg = _regularized_cov(g)
    d = x - mu
    Pd = np.linalg.solve(reg, d)
    return float(np.exp(-0.5 * d @ Pd)), reg, d, Pd


def eval_gaussian_grad(g: Gaussian, x) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradients w.r.t. ``mu``, ``rot``, ``log_scale`` and ``x``."""
    val, reg, d, Pd = _eval_gaussian(g, x)
    dd = -val * Pd
    dreg = 0.5 * val * np.outer(Pd, Pd)
    dcov = dreg + 1e-9 * np.trace(dreg) * np.eye(3)
    drot, dlog = build_covariance_backward(g.rot, g.log_scale, dcov)
    return val, {"mu": -dd, "x": dd, "rot": drot, "log_scale": dlog}


def eval_color(g: Gaussian, view_dir) -> np.ndarray:
    """RGB of a Gaussian seen along ``view_dir`` (from camera towards the Gaussian)."""
    sh = np.asarray(g.color, dtype=np.float64).reshape(1, -1, 3)
    return _sh.eval_sh_colors(sh, np.asarray(view_dir, dtype=np.float64)[None])[0][0]


def activate(gs: GaussianSet, cam_center) -> tuple[ViewGaussians, tuple]:
    """Per-view activated Gaussians: exp scales, sigmoid opacities, SH colours."""
    dt = gs.dtype
    dirs = gs.means - np.asarray(cam_center).astype(dt)
    colors, sh_cache = _sh.eval_sh_colors(gs.sh, dirs)
    scales = np.exp(gs.log_scales)
    opac = 1.0 / (1.0 + np.exp(-gs.opacity_logits))
    vg = ViewGaussians(gs.means, gs.quats, scales, opac, colors)
    return vg, (sh_cache, scales, opac)


def activate_backward(gs: GaussianSet, cache, grad: ViewGaussians) -> GaussianSet:
    sh_cache, scales, opac = cache
    dsh, ddirs = _sh.eval_sh_colors_backward(sh_cache, grad.colors)
    return GaussianSet(
        means=grad.means + ddirs,
        quats=grad.quats.copy(),
        log_scales=grad.scales * scales,
        opacity_logits=grad.opacities * opac * (1 - opac),
        sh=dsh,
    )
