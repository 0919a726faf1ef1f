"""The implicit parameter bundle and the per-view forward/backward chain.

One ``ViewPass`` covers: visibility -> gather -> hash encoding -> spatial MLP ->
auxiliary fusion -> decode -> offset pool -> mix, and routes gradients back to
the coarse Gaussians and every implicit parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosplat import decoder as dec
from holosplat.config import RunConfig
from holosplat.decoder import DecoderStack
from holosplat.hashgrid import HashField, aabb_from_points, encode_backward, encode_forward
from holosplat.mixer import OffsetPool, build_decoded, build_decoded_backward, mix, split_mixed
from holosplat.scene import Camera, GaussianSet, ViewGaussians, activate, activate_backward
from holosplat.visibility import (VisibilityConfig, VisibleSelection, gather, gather_backward,
                                  select_visible)

MODES = ("all", "coarse", "decoded", "mixed")


@dataclass
class Phi:
    field: HashField
    decoder: DecoderStack
    pool: OffsetPool

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"hash": self.field.tables}
        for name, mlp in zip(("theta1", "theta2", "theta3"), self.decoder.mlps()):
            for i, p in enumerate(mlp.params()):
                out[f"{name}.{i}"] = p
        out["pool"] = self.pool.offsets
        return out

    @property
    def frozen(self) -> bool:
        """True once the box and pool have been fixed from a trained coarse set."""
        return self.field.aabb is not None

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.field.aabb[1] - self.field.aabb[0]))


@dataclass
class PassOptions:
    vis: VisibilityConfig
    use_hash_encoding: bool = True
    use_attention: bool = True
    use_offset_pool: bool = True
    scale_cap_frac: float = 0.1
    offset_cap_frac: float = 0.02

    @classmethod
    def from_config(cls, cfg: RunConfig) -> PassOptions:
        return cls(VisibilityConfig(cfg.opacity_threshold, cfg.margin_scale, cfg.margin_cap_px),
                   cfg.use_hash_encoding, cfg.use_attention, cfg.use_offset_pool,
                   cfg.scale_cap_frac, cfg.offset_cap_frac)


def init_phi(cfg: RunConfig, seed_gaussians: GaussianSet, rng, dtype=np.float32) -> Phi:
    """Implicit parameters before coarse training; box and pool are set by ``freeze_coarse``."""
    field = HashField.create(cfg.hash_levels, cfg.hash_min_res, cfg.hash_max_res,
                             2 ** cfg.hash_log2_table_size, cfg.hash_features, rng=rng,
                             init_range=cfg.hash_init_range, dtype=dtype)
    init_log_scale = float(np.median(seed_gaussians.log_scales)) if len(seed_gaussians) else -3.0
    stack = DecoderStack.create(field.out_dim, width=cfg.mlp_width, feat_dim=cfg.feature_width,
                                offset_head=not cfg.use_offset_pool, init_log_scale=init_log_scale,
                                opacity_bias=cfg.opacity_bias_init, rng=rng, dtype=dtype)
    return Phi(field, stack, OffsetPool.zeros(0, dtype))


def freeze_coarse(phi: Phi, coarse: GaussianSet, cfg: RunConfig) -> None:
    """Fix the encoding box from the coarse positions and size the pool to N_c."""
    phi.field.set_aabb(aabb_from_points(coarse.means, cfg.aabb_dilate))
    phi.pool = OffsetPool.zeros(len(coarse), phi.field.tables.dtype)


class ViewPass:
    """Forward for one camera; call ``backward`` with dL/d(rendered Gaussians)."""

    def __init__(self, coarse: GaussianSet, phi: Phi | None, cam: Camera, mode: str,
                 opts: PassOptions):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.coarse, self.phi, self.cam, self.mode, self.opts = coarse, phi, cam, mode, opts
        self.n_coarse = len(coarse)
        if mode == "all":
            self.sel = VisibleSelection(np.arange(len(coarse)))
            self.gv_raw = coarse
        else:
            self.sel = select_visible(coarse, cam, opts.vis)
            self.gv_raw = gather(coarse, self.sel)
        self.gv, self._act = activate(self.gv_raw, cam.center)
        self.n_v = self.sel.count
        if mode in ("all", "coarse"):
            self.gaussians = self.gv
            return
        if phi is None or not phi.frozen:
            raise ValueError("decoded modes need implicit parameters fixed after the coarse stage")
        self._decode_forward()
        self.gaussians = self.gphi if mode == "decoded" else mix(self.gv, self.gphi)

    @property
    def rows_to_coarse(self) -> np.ndarray:
        """Coarse index for each rendered row (-1 for decoded rows)."""
        if self.mode in ("all", "coarse"):
            return self.sel.indices
        dec_rows = np.full(self.n_v, -1)
        return dec_rows if self.mode == "decoded" else np.concatenate([self.sel.indices, dec_rows])

    def _decode_forward(self):
        phi, opts, g = self.phi, self.opts, self.gv_raw
        dt = phi.field.tables.dtype
        if opts.use_hash_encoding:
            self.enc, self._enc_cache = encode_forward(phi.field, g.means)
        else:
            self.enc, self._enc_cache = np.ones((self.n_v, phi.field.out_dim), dt), None
        stack = phi.decoder
        self.h_s, self._acts1 = stack.theta1.forward(self.enc)
        self.h_a = dec.aux_features(g.quats, g.log_scales, self.cam, phi.field.aabb)
        theta2 = stack.theta2 if opts.use_attention else None
        self.h_gs, self._fuse_cache = dec.fuse(self.h_s, self.h_a, theta2)
        diag = phi.diagonal()
        offset_cap = None if opts.use_offset_pool else opts.offset_cap_frac * diag
        self.attrs, self._dec_cache = dec.decode(self.h_gs, stack.theta3, opts.scale_cap_frac * diag,
                                                 offset_cap)
        pool = phi.pool if opts.use_offset_pool else None
        self.gphi = build_decoded(self.sel, g.means, self.attrs, pool)

    def backward(self, grad: ViewGaussians):
        """Returns (coarse gradients as a full-size GaussianSet, dict of implicit gradients)."""
        phi_grads: dict[str, np.ndarray] = {}
        if self.mode in ("all", "coarse"):
            g_gv, g_phi = grad, None
        elif self.mode == "decoded":
            g_gv, g_phi = self.gv.zeros_like(), grad
        else:
            g_gv, g_phi = split_mixed(grad, self.n_v)
        gsub = activate_backward(self.gv_raw, self._act, g_gv)
        if g_phi is not None:
            self._decode_backward(g_phi, gsub, phi_grads)
        if self.mode == "all":
            return gsub, phi_grads
        return gather_backward(gsub, self.sel, self.n_coarse), phi_grads

    def _decode_backward(self, g_phi: ViewGaussians, gsub: GaussianSet, out: dict):
        phi, opts = self.phi, self.opts
        stack = phi.decoder
        pool = phi.pool if opts.use_offset_pool else None
        dmu, dpool, doff = build_decoded_backward(self.sel, g_phi, pool)
        gsub.means += dmu
        if dpool is not None:
            out["pool"] = dpool
        dh_gs, g3 = dec.decode_backward(stack.theta3, self.attrs, self._dec_cache, g_phi.opacities,
                                        g_phi.quats, g_phi.scales, g_phi.colors, doff)
        theta2 = stack.theta2 if opts.use_attention else None
        dh_s, dh_a, g2 = dec.fuse_backward(theta2, self._fuse_cache, dh_gs)
        if dh_a is not None:
            dq, dls = dec.aux_features_backward(self.gv_raw.quats, dh_a)
            gsub.quats += dq
            gsub.log_scales += dls
        denc, g1 = stack.theta1.backward(self._acts1, dh_s)
        if opts.use_hash_encoding:
            dtab, dx = encode_backward(phi.field, self._enc_cache, denc)
            out["hash"] = dtab
            gsub.means += dx
        for name, grads in (("theta1", g1), ("theta2", g2), ("theta3", g3)):
            for i, gr in enumerate(grads):
                out[f"{name}.{i}"] = gr
