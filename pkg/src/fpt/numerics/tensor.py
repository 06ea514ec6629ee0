"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient tape node. Ops build the
tape only when some input has requires_grad=True, so frozen-path evaluation
(e.g. the pretrained backbone) allocates no gradient bookkeeping at all.

Training runs in float32; gradient checks build the same graphs in float64.
"""

import math

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """An ndarray with an optional backward graph.

    grad is populated only on leaf tensors created with requires_grad=True;
    everything else stays grad-free after backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad=False, _ctx=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return out

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor, accumulating into leaf .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        # Topological order over the tape (iterative; graphs can be deep).
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class _Context:
    """Links an op's output back to its parents and backward rule."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Build the output tensor; attach a tape node only if some parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _ctx=_Context(parents, backward))
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Reduce grad (a broadcast result) back to the given operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, [a, b], backward)


def mul(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, [a, b], backward)


def power(a, p):
    a = _wrap(a)
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, [a], backward)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, [a], backward)


def log(a):
    a = _wrap(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, [a], backward)


def gelu(a):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _wrap(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf
    if out.dtype != a.data.dtype:
        out = out.astype(a.data.dtype)
        cdf = cdf.astype(a.data.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf.astype(a.data.dtype)),)

    return _make(out, [a], backward)


# -- shape ops ------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy leading-dim broadcasting."""
    a = _wrap(a)
    b = _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, [a, b], backward)


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(out, [a], backward)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(out, [a], backward)


def broadcast_to(a, shape):
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape)

    def backward(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(np.ascontiguousarray(out), [a], backward)


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def take(a, idx):
    """Basic indexing (ints/slices/ellipsis); scatter-add on backward."""
    a = _wrap(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, [a], backward)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, [a], backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    scale = 1.0 / float(count)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, a.data.shape).astype(a.data.dtype),)

    return _make(out, [a], backward)


def dropout(a, p, rng):
    """Inverted dropout; identity when p == 0."""
    a = _wrap(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    scale = 1.0 / (1.0 - p)
    out = a.data * keep * scale

    def backward(g):
        return (g * keep * scale,)

    return _make(out, [a], backward)


# -- normalization, attention, loss ---------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax; slices along axis sum to 1.

    Raises ValueError on non-finite input.
    """
    a = _wrap(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, [a], backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply the affine gain/bias."""
    x = _wrap(x)
    gain = _wrap(gain, like=x)
    bias = _wrap(bias, like=x)
    if x.data.shape[-1] < 2:
        raise ShapeError("layer_norm needs last-axis extent >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx.astype(x.data.dtype), dgain, dbias

    return _make(out, [x, gain, bias], backward)


def scaled_dot_attention(q, k, v):
    """softmax(Q Kᵀ / sqrt(d_head)) V over per-head token stacks.

    Q: (B, h, n_q, d_h); K, V: (B, h, n_k, d_h). Returns (output, attention map);
    the map is (B, h, n_q, n_k) with rows summing to 1 and stays on the tape, so
    gradients flow through it.
    """
    q = _wrap(q)
    k = _wrap(k)
    v = _wrap(v)
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("attention expects (B, h, n, d_h) operands")
    if q.shape[:2] != k.shape[:2] or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"attention batch/head dims differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[2] != v.shape[2] or q.shape[3] != k.shape[3]:
        raise ShapeError(f"attention key/value dims differ: {k.shape} vs {v.shape}")
    d_h = q.shape[-1]
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_h))
    attn = softmax(logits, axis=-1)
    out = matmul(attn, v)
    return out, attn


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (B, C); labels: length-B integer array, each in [0, C).
    """
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range [0, {classes})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    idx = np.arange(batch)
    losses = lse - z[idx, labels]
    out = np.asarray(losses.mean(), dtype=z.dtype)

    def backward(g):
        probs = np.exp(z - zmax)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[idx, labels] -= 1.0
        return (g * probs / batch,)

    return _make(out, [logits], backward)
