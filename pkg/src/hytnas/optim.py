"""Optimizers and learning-rate schedules.

Weight decay is the classic additive-to-the-gradient (L2) form for both
optimizers. State buffers are keyed by parameter name, so an optimizer
survives checkpoint round trips as long as names are stable.
"""

from __future__ import annotations

import math

import numpy as np


class SGD:
    """Momentum SGD: v <- momentum*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads):
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {p.name!r}")
            g = g + self.weight_decay * p.data if self.weight_decay else g
            v = self._velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    """Bias-corrected Adam with additive L2 weight decay."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads):
        self.t += 1
        if self.t < 1:
            raise ValueError("adam step counter must be >= 1")
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {p.name!r}")
            g = g + self.weight_decay * p.data if self.weight_decay else g
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grads, max_norm):
    """Scale a gradient map in place so its global L2 norm is <= max_norm.

    A max_norm of 0 (or None) disables clipping. Returns the pre-clip norm.
    """
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def cosine_lr(step, total, lr_max, lr_min):
    """Cosine annealing from lr_max at step 0 to lr_min at step == total."""
    if total <= 0:
        raise ValueError("cosine schedule needs total > 0")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def poly_lr(iteration, max_iter, init_lr, power):
    """Polynomial decay: init_lr * (1 - iter/max_iter)**power."""
    if max_iter <= 0:
        raise ValueError("poly schedule needs max_iter > 0")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return init_lr * (1.0 - iteration / max_iter) ** power
