"""Adam over named parameter groups."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with per-group step counters; updates arrays in place.

    ``lr`` may be a scalar or an array broadcastable to the parameter (used for
    the SH groups, where higher bands get a smaller rate).
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr) -> None:
        st = self.state.get(name)
        if st is None or st["m"].shape != param.shape:
            st = {"step": 0, "m": np.zeros_like(param), "v": np.zeros_like(param)}
            self.state[name] = st
        dt = param.dtype
        st["step"] += 1
        t = st["step"]
        b1, b2 = dt.type(self.beta1), dt.type(self.beta2)
        m, v = st["m"], st["v"]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        bc1 = 1 - self.beta1 ** t
        bc2 = np.sqrt(1 - self.beta2 ** t)
        step_size = np.asarray(lr, dtype=np.float64) / bc1
        update = (step_size * (m / (np.sqrt(v) / bc2 + self.eps))).astype(dt)
        param -= update

    def remap(self, name: str, keep: np.ndarray, n_new: int) -> None:
        """Keep moment rows ``keep`` and append ``n_new`` zero rows (after densification)."""
        st = self.state.get(name)
        if st is None:
            return
        for key in ("m", "v"):
            a = st[key][keep]
            st[key] = np.concatenate([a, np.zeros((n_new,) + a.shape[1:], a.dtype)])

    def reset(self, name: str, rows=None) -> None:
        st = self.state.get(name)
        if st is None:
            return
        if rows is None:
            del self.state[name]
        else:
            st["m"][rows] = 0
            st["v"][rows] = 0


def exp_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0 or lr_init == lr_final:
        return lr_init
    t = np.clip(step / max_steps, 0.0, 1.0)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))
