"""Offset pool, decoded Gaussian construction and mixing with the visible coarse set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosplat.decoder import DecodedAttrs
from holosplat.scene import ViewGaussians
from holosplat.visibility import VisibleSelection


@dataclass
class OffsetPool:
    """One learnable world-space displacement per coarse Gaussian."""

    offsets: np.ndarray  # (N_c, 3)

    def __len__(self) -> int:
        return len(self.offsets)

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> OffsetPool:
        return cls(np.zeros((n, 3), dtype))

    def clamp_(self, cap: float) -> None:
        """Rescale rows whose norm exceeds ``cap`` (in place)."""
        norm = np.linalg.norm(self.offsets, axis=1, keepdims=True)
        over = norm > cap
        if np.any(over):
            self.offsets[:] = np.where(over, self.offsets * (cap / np.where(over, norm, 1)),
                                       self.offsets).astype(self.offsets.dtype)


def build_decoded(sel: VisibleSelection, coarse_mu, attrs: DecodedAttrs,
                  pool: OffsetPool | None) -> ViewGaussians:
    """Decoded Gaussians at mu + o, one per visible Gaussian.

    With ``pool=None`` the offsets come from the decoder's own offset head.
    """
    n = sel.count
    if len(coarse_mu) != n or len(attrs) != n:
        raise ValueError(f"count mismatch: selection {n}, positions {len(coarse_mu)}, "
                         f"decoded {len(attrs)}")
    if pool is not None:
        off = pool.offsets[sel.indices]
    elif attrs.offset is not None:
        off = attrs.offset
    else:
        raise ValueError("no offset source: give a pool or decode an offset head")
    return ViewGaussians(coarse_mu + off, attrs.rot, attrs.scale, attrs.opacity, attrs.color)


def build_decoded_backward(sel: VisibleSelection, grad: ViewGaussians, pool: OffsetPool | None):
    """Returns (d coarse_mu, d pool (N_c, 3) or None, d_offset head or None)."""
    dpool = None
    doff = None
    if pool is not None:
        dpool = np.zeros_like(pool.offsets)
        np.add.at(dpool, sel.indices, grad.means)
    else:
        doff = grad.means
    return grad.means, dpool, doff


def mix(gv: ViewGaussians, gphi: ViewGaussians) -> ViewGaussians:
    """Union of visible and decoded Gaussians, visible rows first, no de-duplication."""
    return ViewGaussians(**{k: np.concatenate([v, gphi.arrays()[k]]) for k, v in gv.arrays().items()})


def split_mixed(grad: ViewGaussians, n_v: int) -> tuple[ViewGaussians, ViewGaussians]:
    return grad.take(slice(0, n_v)), grad.take(slice(n_v, None))
