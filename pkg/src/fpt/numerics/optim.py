"""AdamW with decoupled weight decay.

The decay term is applied directly to the parameter (never routed through the
moment accumulators), so with zero gradients and decay L each step scales the
parameter by exactly (1 - lr * L).
"""

import numpy as np


class AdamW:
    """Bias-corrected Adam update plus decoupled weight decay.

    Updates are pure numpy expressions evaluated in a fixed order, so a step
    with identical inputs is bit-deterministic.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("AdamW given a parameter with requires_grad=False")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)
