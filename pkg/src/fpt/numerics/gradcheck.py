"""Finite-difference validation of reverse-mode gradients.

Gradient checks run in float64 with central differences; the relative-error
denominator |analytic| + |numeric| + 1e-12 keeps the measure stable when a
coordinate's true gradient is near zero.
"""

import numpy as np

from .tensor import Tensor


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between f's reverse-mode gradient and central differences.

    f maps a Tensor to a scalar Tensor; x supplies the evaluation point and is
    promoted to a float64 leaf. Every coordinate is probed, so keep x small.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
