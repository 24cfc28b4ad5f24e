"""Adam / AdamW on flat numpy parameter vectors."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``).

    ``lr_scale`` is an optional per-entry multiplier of the step size with the
    same shape as the parameters.
    """

    def __init__(self, shape, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 lr_scale=None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = None if lr_scale is None else np.asarray(lr_scale, dtype=np.float64)
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr=None) -> np.ndarray:
        """Update ``params`` in place and return it."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        sq = np.multiply(grad, grad)
        sq *= 1.0 - self.beta2
        self.v += sq
        # m_hat / (sqrt(v_hat) + eps), evaluated in place
        denom = np.sqrt(self.v, out=sq)
        denom /= np.sqrt(bias2)
        denom += self.eps
        step = np.divide(self.m, denom, out=denom)
        step *= lr / bias1
        if self.lr_scale is not None:
            step *= self.lr_scale
        if self.weight_decay:
            params -= lr * self.weight_decay * params
        params -= step
        return params


def warmup_decay_lr(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear ramp from 0 over ``warmup`` steps, then linear decay to 0 at ``total``.

    ``step`` counts from 0; the first update uses ``base_lr / warmup``.
    """
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))
