"""Adam with global-norm clipping and a cosine learning-rate schedule."""

import math

import numpy as np


def cosine_lr(step, total, lr_init, lr_final):
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 1:
        return lr_init
    t = min(step, total - 1) / (total - 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` (list of arrays) so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class Adam:
    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr=None):
        """Apply one update from ``grads`` (dict keyed by parameter tensor).

        Returns the pre-clipping global gradient norm.
        """
        lr = self.lr if lr is None else lr
        gs = [grads[p] for p in self.params]
        gs, norm = clip_by_global_norm(gs, self.clip_norm)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return norm
