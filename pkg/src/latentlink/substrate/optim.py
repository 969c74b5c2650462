from __future__ import annotations

import numpy as np

from .functional import clip_by_global_norm
from .params import ParameterSet


def _decays(name: str) -> bool:
    # normalization scales/shifts and biases are exempt from weight decay
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("w")


class Adam:
    """Adam with bias correction, optional global-norm clipping and decoupled weight decay."""

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> float:
        """Apply one update from the accumulated gradients; return the gradient norm."""
        norm = clip_by_global_norm(self.params, self.clip_norm if self.clip_norm else np.inf)
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and _decays(name):
                update = update + self.lr * self.weight_decay * t.data
            t.data = (t.data - update).astype(t.data.dtype)
        self.params.bump()
        return norm

    def state(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.float64)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out
