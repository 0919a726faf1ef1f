"""Real spherical harmonics up to degree 3, with the 0.5 colour offset of 3DGS."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def rgb_to_dc(rgb):
    return (np.asarray(rgb) - 0.5) / C0


def dc_to_rgb(dc):
    return np.asarray(dc) * C0 + 0.5


def basis(degree: int, d):
    """SH basis (N, (degree+1)^2) and its gradient (N, K, 3) at unit directions d."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    B = [C0 * one]
    dB = [(zero, zero, zero)]
    if degree >= 1:
        B += [-C1 * y, C1 * z, -C1 * x]
        dB += [(zero, -C1 * one, zero), (zero, zero, C1 * one), (-C1 * one, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy), C2[3] * x * z,
              C2[4] * (xx - yy)]
        dB += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        B += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
        dB += [
            (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    if degree > 3:
        raise ValueError(f"SH degree {degree} unsupported (max 3)")
    return np.stack(B, axis=1), np.stack([np.stack(g, axis=-1) for g in dB], axis=1)


def eval_sh_colors(sh, dirs):
    """Clamped RGB from SH coefficients (N, K, 3) along (unnormalized) directions (N, 3)."""
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    if degree == 0:
        raw = C0 * sh[:, 0, :] + 0.5
        return np.clip(raw, 0.0, 1.0), (degree, sh, None, None, None, raw)
    norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    norm = np.where(norm > 0, norm, 1.0)
    d = dirs / norm
    B, dB = basis(degree, d)
    raw = np.einsum("nk,nkc->nc", B, sh) + 0.5
    return np.clip(raw, 0.0, 1.0), (degree, sh, d, norm, (B, dB), raw)


def eval_sh_colors_backward(cache, dcolor):
    """Returns (dsh, ddirs)."""
    degree, sh, d, norm, bases, raw = cache
    g = dcolor * ((raw > 0) & (raw < 1))
    dsh = np.zeros_like(sh)
    if degree == 0:
        dsh[:, 0, :] = C0 * g
        return dsh, np.zeros((len(sh), 3), dtype=sh.dtype)
    B, dB = bases
    dsh[...] = B[:, :, None] * g[:, None, :]
    # dL/dd, then through d = v / |v|
    dd = np.einsum("nkc,nc,nki->ni", sh, g, dB)
    dv = (dd - d * np.sum(d * dd, axis=1, keepdims=True)) / norm
    return dsh, dv
