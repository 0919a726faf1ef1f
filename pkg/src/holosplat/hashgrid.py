"""Multi-resolution hash encoding of 3D positions with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PRIMES = (1, 2654435761, 805459861)

# corner c of a voxel uses the upper lattice coordinate along axis d when _CORNERS[c, d]
_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=bool)


def level_resolutions(n_levels: int, n_min: int, n_max: int) -> list[int]:
    """Grid resolution per level: floor(n_min * b**l), b = exp((ln n_max - ln n_min) / (L - 1))."""
    if n_levels < 2:
        raise ValueError("need at least two levels")
    b = math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))
    # the relative nudge keeps the last level at n_max despite rounding in b**l
    return [int(math.floor(n_min * b**l * (1 + 1e-12))) for l in range(n_levels)]


def growth_factor(n_levels: int, n_min: int, n_max: int) -> float:
    return math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))


@dataclass
class HashField:
    n_levels: int
    n_min: int
    n_max: int
    table_size: int
    features: int
    tables: np.ndarray                       # (L, T, F)
    aabb: np.ndarray | None = None           # (2, 3) float64: min row, max row
    primes: tuple = PRIMES
    resolutions: list = field(init=False)

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("need at least two levels")
        if self.n_min > self.n_max:
            raise ValueError("n_min must not exceed n_max")
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError("table size must be a power of two")
        if self.tables.shape != (self.n_levels, self.table_size, self.features):
            raise ValueError(f"table shape {self.tables.shape} does not match metadata")
        if self.aabb is not None:
            self.set_aabb(self.aabb)
        self.resolutions = level_resolutions(self.n_levels, self.n_min, self.n_max)

    @classmethod
    def create(cls, n_levels=16, n_min=16, n_max=2048, table_size=2**19, features=2, *,
               rng=None, init_range=1e-4, dtype=np.float32) -> HashField:
        rng = rng if rng is not None else np.random.default_rng()
        tables = rng.uniform(-init_range, init_range, (n_levels, table_size, features)).astype(dtype)
        return cls(n_levels, n_min, n_max, table_size, features, tables)

    def set_aabb(self, aabb):
        aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(aabb[0] < aabb[1]):
            raise ValueError("aabb min must be below max on every axis")
        self.aabb = aabb

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.features

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= self.table_size


def aabb_from_points(points, dilate: float = 0.05) -> np.ndarray:
    """Bounding box of the points grown by ``dilate`` of its extent on each side."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    ext = np.maximum(hi - lo, 1e-6)
    return np.stack([lo - dilate * ext, hi + dilate * ext])


def hash_index(k, field: HashField, level: int):
    """Table slot for integer lattice coordinates k (..., 3) at ``level``.

    Levels whose dense grid fits the table use row-major indexing; the others
    XOR the coordinates multiplied (with uint32 wrap-around) by the primes.
    """
    if not 0 <= level < field.n_levels:
        raise IndexError(f"level {level} out of range")
    k = np.asarray(k, dtype=np.int64)
    if field.is_dense(level):
        side = field.resolutions[level] + 1
        return (k[..., 0] * side + k[..., 1]) * side + k[..., 2]
    ku = k.astype(np.uint32)
    p = [np.uint32(pi) for pi in field.primes]
    h = (ku[..., 0] * p[0]) ^ (ku[..., 1] * p[1]) ^ (ku[..., 2] * p[2])
    return (h % np.uint32(field.table_size)).astype(np.int64)


@dataclass
class EncodeCache:
    n: int
    inside: np.ndarray
    extent: np.ndarray
    levels: list        # per level: (idx (N,8), factors (N,8,3), weights (N,8), flat (N,3))


def encode_forward(field: HashField, x) -> tuple[np.ndarray, EncodeCache]:
    x = np.atleast_2d(np.asarray(x))
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite position")
    if field.aabb is None:
        raise ValueError("hash field has no bounding box yet")
    dt = field.tables.dtype
    lo, hi = field.aabb[0].astype(dt), field.aabb[1].astype(dt)
    extent = hi - lo
    raw = (x.astype(dt) - lo) / extent
    inside = (raw >= 0) & (raw <= 1)
    p = np.clip(raw, 0, 1)
    n = len(x)
    out = np.empty((n, field.n_levels, field.features), dt)
    levels = []
    for l, res in enumerate(field.resolutions):
        s = p * dt.type(res)
        k0 = np.floor(s)
        k1 = np.ceil(s)
        w = s - k0
        k = np.where(_CORNERS[None], k1[:, None, :], k0[:, None, :]).astype(np.int64)
        idx = hash_index(k, field, l)
        factors = np.where(_CORNERS[None], w[:, None, :], 1 - w[:, None, :])
        weights = factors.prod(axis=2)
        out[:, l, :] = np.einsum("nc,ncf->nf", weights, field.tables[l][idx])
        levels.append((idx, factors, weights, k0 == k1))
    return out.reshape(n, -1), EncodeCache(n, inside, extent, levels)


def encode(field: HashField, x) -> np.ndarray:
    """Concatenated trilinearly interpolated features, shape (N, L*F) (or (L*F,) for one point)."""
    single = np.asarray(x).ndim == 1
    out, _ = encode_forward(field, x)
    return out[0] if single else out


def encode_backward(field: HashField, cache: EncodeCache, upstream):
    """Returns (table gradients (L, T, F), position gradients (N, 3)).

    Position gradients are zero along an axis whose coordinate lies exactly on
    a lattice plane at some level (floor == ceil there).
    """
    dt = field.tables.dtype
    g = np.asarray(upstream, dtype=dt).reshape(cache.n, field.n_levels, field.features)
    dtables = np.zeros_like(field.tables)
    dp = np.zeros((cache.n, 3), dt)
    T, F = field.table_size, field.features
    for l, (idx, factors, weights, flat) in enumerate(cache.levels):
        gl = g[:, l, :]
        flat_idx = idx.ravel()
        for f in range(F):
            dtables[l, :, f] = np.bincount(flat_idx, weights=(weights * gl[:, None, f]).ravel(),
                                           minlength=T)
        gf = np.einsum("nf,ncf->nc", gl, field.tables[l][idx])
        sign = np.where(_CORNERS, 1.0, -1.0).astype(dt)
        for d in range(3):
            others = [e for e in range(3) if e != d]
            partial = factors[:, :, others[0]] * factors[:, :, others[1]] * sign[None, :, d]
            ds = np.sum(gf * partial, axis=1)
            ds[flat[:, d]] = 0
            dp[:, d] += ds * dt.type(field.resolutions[l])
    dx = np.where(cache.inside, dp / cache.extent, 0)
    return dtables, dx
