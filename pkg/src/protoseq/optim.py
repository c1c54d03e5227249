"""Adam with decoupled weight decay, plus a linear-warmup schedule."""
from __future__ import annotations

import math

import numpy as np


def warmup_lr(base_lr: float, step: int, total_steps: int,
              warmup_fraction: float) -> float:
    """Learning rate at 1-indexed ``step``.

    Ramps linearly as base_lr * step / ceil(warmup_fraction * total_steps)
    during warmup, then stays at base_lr.
    """
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must be in [0, 1)")
    warmup_steps = math.ceil(warmup_fraction * total_steps)
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


class AdamW:
    """Decoupled-weight-decay adaptive-moment updates over named arrays.

    Parameters are live numpy arrays updated in place. Weight decay is
    applied directly to the parameter (scaled by the step's learning rate),
    not folded into the gradient; names in ``decay_exempt`` skip it.
    """

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 decay_exempt: tuple[str, ...] = ()):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_exempt = frozenset(decay_exempt)
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}
        self._scratch = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            buf = self._scratch[name]
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            np.divide(v, bc2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf /= bc1
            if self.weight_decay and name not in self.decay_exempt:
                buf += self.weight_decay * p
            buf *= lr
            p -= buf
