"""Adam with coupled L2 regularisation."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError


class Adam:
    """Adam where ``weight_decay * p`` is added to each gradient before the moment updates.

    Moment buffers and step counts are kept per parameter name, so updating
    disjoint namespaces in alternation (discriminator / generator) gives each
    its own bias correction.
    """

    def __init__(self, lr=5e-3, weight_decay=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {weight_decay}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, store, names=None):
        for name in (list(store) if names is None else names):
            p = store[name]
            g = store.grad(name) + self.weight_decay * p
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            # new array, so values captured on an open tape stay valid
            store[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(store, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """Functional wrapper: one Adam step on every entry, reusing ``state`` if given."""
    opt = state if state is not None else Adam(lr, weight_decay, beta1, beta2, eps)
    opt.step(store)
    return opt
