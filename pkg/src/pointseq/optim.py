"""Decoupled-weight-decay Adam with warmup plus cosine decay.

Updates walk the parameter store in sorted-name order, so a run is
reproducible from (seed, config) with a single worker.
"""

from __future__ import annotations

import numpy as np

from .encoder import ParamStore


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int,
          schedule: str = "cosine") -> float:
    """Step is 1-indexed; linear warmup, then cosine decay to zero."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant" or total_steps <= warmup_steps:
        return base_lr
    frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))


class AdamW:
    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 lr_scales: dict[str, float] | None = None):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scales = lr_scales or {}
        self._m = {name: np.zeros(t.shape) for name, t in store.items()}
        self._v = {name: np.zeros(t.shape) for name, t in store.items()}
        self._t = 0

    def _scale_for(self, name: str) -> float:
        best_len, scale = -1, 1.0
        for prefix, s in self.lr_scales.items():
            if name.startswith(prefix) and len(prefix) > best_len:
                best_len, scale = len(prefix), s
        return scale

    def step(self, lr: float | None = None) -> None:
        self._t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step_lr = lr * self._scale_for(name)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= step_lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        self.store.zero_grad()
