"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import MissingGradError
from .tensor import Tensor


class AdamW:
    """Standard AdamW: bias-corrected moments, weight decay applied
    directly to the parameter, not through the moments.

    Parameters are (name, Tensor) pairs; updates mutate tensor data in
    place so the same objects stay live across steps.
    """

    def __init__(self, params, lr: float = 4e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params.items()) if isinstance(params, dict) else list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradError(f"parameter '{name}' has no gradient")
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def grad_global_norm(params) -> float:
    """L2 norm over all gradients; params is an iterable of (name, Tensor)."""
    sq = 0.0
    for _, p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(sq))


def clip_grads(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = grad_global_norm(params)
    if norm > max_norm > 0.0:
        scale = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
