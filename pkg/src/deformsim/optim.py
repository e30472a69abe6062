"""Adam optimizer over flat parameter dicts.

Works on plain ndarrays: callers compute gradients however they like
(tape backward, hand-written adjoint) and feed them in.
"""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction.

    Args:
        params: dict name -> ndarray, updated in place by :meth:`step`.
        lr: learning rate.
        betas: exponential decay rates for the moment estimates.
        eps: denominator fuzz.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        """Apply one update from ``grads`` (same keys as params)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(grads, max_norm):
    """Scale the gradient dict in place so its global norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    total = np.sqrt(total)
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
