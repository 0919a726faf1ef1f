"""Tiny MLPs with hand-written backward passes: spatial MLP, pose-aware attention
fusion, and the multi-head Gaussian attribute decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosplat.scene import normalize_quats, rotmat_to_quat, Camera

AUX_DIM = 14
# decoder output layout: opacity | rotation (4) | log-scale (3) | colour (3) [| offset (3)]
HEAD_SLICES = {"opacity": slice(0, 1), "rot": slice(1, 5), "scale": slice(5, 8),
               "color": slice(8, 11), "offset": slice(11, 14)}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class Mlp:
    """Fully connected net, ReLU between layers, linear output. Weights are (in, out)."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input {w.shape[0]} does not chain with "
                                 f"previous output {self.weights[i - 1].shape[1]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def create(cls, dims, rng, dtype=np.float32) -> Mlp:
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype))
        return cls(ws, bs)

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def forward(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.dims[0]}")
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, grad):
        """Returns (input gradient, [dW0, db0, dW1, db1, ...])."""
        grads = []
        g = grad
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            g = g @ self.weights[i].T
        return g, grads[::-1]


def spatial_feature(enc, theta1: Mlp):
    """h_s = theta1(hash features)."""
    return theta1.forward(enc)


def aux_features(quats, log_scales, cam: Camera, aabb):
    """Per-Gaussian auxiliary vector: unit rotation (4), log-scale (3), camera
    orientation quaternion (4) and camera position in box coordinates (3)."""
    dt = quats.dtype
    n = len(quats)
    cam_q = rotmat_to_quat(cam.rotation.T).astype(dt)
    lo, hi = np.asarray(aabb[0]), np.asarray(aabb[1])
    cam_p = ((cam.center - lo) / (hi - lo)).astype(dt)
    h = np.concatenate([normalize_quats(quats), log_scales,
                        np.broadcast_to(cam_q, (n, 4)), np.broadcast_to(cam_p, (n, 3))], axis=1)
    return h


def aux_features_backward(quats, grad):
    """Gradients (dquats, dlog_scales) from dL/dh_a."""
    n = np.linalg.norm(quats, axis=1, keepdims=True)
    u = quats / n
    g = grad[:, :4]
    dq = (g - u * np.sum(u * g, axis=1, keepdims=True)) / n
    return dq, grad[:, 4:7]


def fuse(h_s, h_a, theta2: Mlp | None):
    """h_gs = (2 sigmoid(theta2(h_a)) - 1) * h_s. ``theta2=None`` skips the modulation."""
    if theta2 is None:
        return h_s, None
    a, acts = theta2.forward(h_a)
    if a.shape != h_s.shape:
        raise ValueError(f"attention width {a.shape} != spatial feature width {h_s.shape}")
    s = sigmoid(a)
    return (2 * s - 1) * h_s, (acts, s, h_s)


def fuse_backward(theta2: Mlp | None, cache, grad):
    """Returns (dh_s, dh_a, theta2 grads)."""
    if theta2 is None:
        return grad, None, []
    acts, s, h_s = cache
    dh_s = grad * (2 * s - 1)
    da = grad * h_s * 2 * s * (1 - s)
    dh_a, g2 = theta2.backward(acts, da)
    return dh_s, dh_a, g2


@dataclass
class DecodedAttrs:
    raw: np.ndarray
    opacity: np.ndarray      # (N,)
    rot: np.ndarray          # (N, 4) unit
    scale: np.ndarray        # (N, 3)
    color: np.ndarray        # (N, 3)
    offset: np.ndarray | None = None
    n_degenerate: int = 0

    def __len__(self) -> int:
        return len(self.raw)


def decode(h_gs, theta3: Mlp, scale_cap: float, offset_cap: float | None = None):
    """Multi-head decode. theta3's last layer stacks the four heads (and an optional
    offset head) column-wise, so each head is a linear map off the shared trunk."""
    raw, acts = theta3.forward(h_gs)
    dt = raw.dtype
    opacity = sigmoid(raw[:, 0])
    r = raw[:, HEAD_SLICES["rot"]]
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    bad = norm[:, 0] == 0
    rot = np.where(bad[:, None], np.array([1, 0, 0, 0], dt), r / np.where(bad[:, None], 1, norm))
    s_exp = np.exp(raw[:, HEAD_SLICES["scale"]])
    scale = np.clip(s_exp, dt.type(1e-6), dt.type(scale_cap))
    color = sigmoid(raw[:, HEAD_SLICES["color"]])
    offset = None
    if offset_cap is not None:
        if raw.shape[1] < 14:
            raise ValueError("decoder has no offset head")
        offset = dt.type(offset_cap) * np.tanh(raw[:, HEAD_SLICES["offset"]])
    attrs = DecodedAttrs(raw, opacity, rot, scale, color, offset, int(bad.sum()))
    return attrs, (acts, norm, bad, s_exp, scale_cap, offset_cap)


def decode_backward(theta3: Mlp, attrs: DecodedAttrs, cache, d_opacity, d_rot, d_scale, d_color,
                    d_offset=None):
    """Returns (dh_gs, theta3 grads) given gradients w.r.t. the activated outputs."""
    acts, norm, bad, s_exp, scale_cap, offset_cap = cache
    graw = np.zeros_like(attrs.raw)
    graw[:, 0] = d_opacity * attrs.opacity * (1 - attrs.opacity)
    u = attrs.rot
    gr = (d_rot - u * np.sum(u * d_rot, axis=1, keepdims=True)) / np.where(bad[:, None], 1, norm)
    graw[:, HEAD_SLICES["rot"]] = np.where(bad[:, None], 0, gr)
    live = (s_exp >= 1e-6) & (s_exp <= scale_cap)
    graw[:, HEAD_SLICES["scale"]] = d_scale * s_exp * live
    graw[:, HEAD_SLICES["color"]] = d_color * attrs.color * (1 - attrs.color)
    if attrs.offset is not None and d_offset is not None:
        t = np.tanh(attrs.raw[:, HEAD_SLICES["offset"]])
        graw[:, HEAD_SLICES["offset"]] = d_offset * offset_cap * (1 - t * t)
    return theta3.backward(acts, graw)


@dataclass
class DecoderStack:
    theta1: Mlp
    theta2: Mlp
    theta3: Mlp

    @classmethod
    def create(cls, in_dim: int, *, width: int = 64, feat_dim: int = 32, offset_head: bool = False,
               init_log_scale: float = -3.0, opacity_bias: float = -2.0, rng=None,
               dtype=np.float32) -> DecoderStack:
        rng = rng if rng is not None else np.random.default_rng()
        t1 = Mlp.create([in_dim, width, feat_dim], rng, dtype)
        t2 = Mlp.create([AUX_DIM, width, feat_dim], rng, dtype)
        t3 = Mlp.create([feat_dim, width, 14 if offset_head else 11], rng, dtype)
        b = t3.biases[-1]
        b[0] = opacity_bias
        b[HEAD_SLICES["rot"]] = (1, 0, 0, 0)
        b[HEAD_SLICES["scale"]] = init_log_scale
        return cls(t1, t2, t3)

    def mlps(self) -> list[Mlp]:
        return [self.theta1, self.theta2, self.theta3]
