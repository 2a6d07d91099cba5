import logging

import numpy as np

log = logging.getLogger(__name__)


def adam_step(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on lists of arrays.

    Returns ``(new_params, new_m, new_v, applied)``.  When any gradient is
    non-finite the step is skipped: inputs come back unchanged and
    ``applied`` is False.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    if not all(np.all(np.isfinite(g)) for g in grads):
        return params, m, v, False
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * g * g
        new_p.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v, True


class Adam:
    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        values = [p.value for p in self.params]
        new_p, new_m, new_v, applied = adam_step(
            values, grads, self.m, self.v, self.t + 1, self.lr, self.beta1, self.beta2, self.eps
        )
        if not applied:
            self.skipped += 1
            log.warning("non-finite gradient, Adam step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        self.m, self.v = new_m, new_v
        for p, value in zip(self.params, new_p):
            p.value = value
        return True
