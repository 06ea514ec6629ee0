"""Transformer building blocks shared by the frozen backbone and the side network.

Blocks use the pre-norm convention (norm before attention and before the MLP),
matching the ViT family. Every layer exposes named_parameters() so models can
be counted, frozen, checkpointed, and freeze-checked by name.
"""

import math

import numpy as np

from .numerics import Tensor, concat, dropout, gelu, layer_norm, matmul
from .numerics import reshape as t_reshape
from .numerics import scaled_dot_attention, transpose


class Module:
    """Minimal parameter container: walks Tensor attributes and sub-modules."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for _, p in self.named_parameters():
            p.requires_grad = False
        return self


class Linear(Module):
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32, init_std=None, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            std = init_std if init_std is not None else 1.0 / math.sqrt(d_in)
            w = rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class MultiHeadSelfAttention(Module):
    """Standard multi-head self-attention over a (B, N, d) sequence.

    forward() can also hand back the per-head attention map and post-projection
    key/value tensors; the backbone taps those for token scoring and reuse.
    """

    def __init__(self, dim, heads, rng, dtype=np.float32, qk_gain=1.0):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        qk_std = qk_gain / math.sqrt(dim)
        self.q_proj = Linear(dim, dim, rng, dtype=dtype, init_std=qk_std)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype, init_std=qk_std)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)

    def _split_heads(self, x, batch, n):
        # (B, N, d) -> (B, h, N, d_h)
        return transpose(t_reshape(x, (batch, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x, return_internals=False):
        batch, n, dim = x.shape
        q = self._split_heads(self.q_proj(x), batch, n)
        k = self._split_heads(self.k_proj(x), batch, n)
        v = self._split_heads(self.v_proj(x), batch, n)
        out, attn = scaled_dot_attention(q, k, v)
        merged = t_reshape(transpose(out, (0, 2, 1, 3)), (batch, n, dim))
        result = self.out_proj(merged)
        if return_internals:
            return result, attn, k, v
        return result


class Mlp(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim, heads, mlp_ratio, rng, dtype=np.float32, dropout_p=0.0, qk_gain=1.0):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype, qk_gain=qk_gain)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype=dtype)
        self.dropout_p = dropout_p

    def __call__(self, x, return_internals=False, rng=None):
        if self.dropout_p > 0.0 and rng is None:
            raise ValueError("dropout is enabled but no rng was supplied")
        attn_out = self.attn(self.norm1(x), return_internals=return_internals)
        if return_internals:
            attn_out, attn_map, keys, values = attn_out
        if self.dropout_p > 0.0:
            attn_out = dropout(attn_out, self.dropout_p, rng)
        x = x + attn_out
        mlp_out = self.mlp(self.norm2(x))
        if self.dropout_p > 0.0:
            mlp_out = dropout(mlp_out, self.dropout_p, rng)
        x = x + mlp_out
        if return_internals:
            return x, attn_map, keys, values
        return x


class PatchEmbed(Module):
    """Patchify a (B, 3, H, H) image, embed patches, prepend CLS, add positions."""

    def __init__(self, image_size, patch_size, dim, rng, dtype=np.float32, pos_table=None):
        if image_size % patch_size != 0:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_tokens = self.grid * self.grid + 1
        self.proj = Linear(3 * patch_size * patch_size, dim, rng, dtype=dtype)
        self.cls = Tensor(rng.normal(0.0, 0.02, size=(1, 1, dim)).astype(dtype), requires_grad=True)
        if pos_table is None:
            pos_table = rng.normal(0.0, 0.02, size=(self.num_tokens, dim)).astype(dtype)
        self.pos = Tensor(np.asarray(pos_table, dtype=dtype), requires_grad=True)

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(images)
        batch = x.shape[0]
        p, g = self.patch_size, self.grid
        if x.shape[1:] != (3, self.image_size, self.image_size):
            raise ValueError(f"expected (B, 3, {self.image_size}, {self.image_size}), got {x.shape}")
        # (B, 3, g, p, g, p) -> (B, g, g, 3, p, p) -> (B, g*g, 3*p*p)
        patches = t_reshape(
            transpose(t_reshape(x, (batch, 3, g, p, g, p)), (0, 2, 4, 1, 3, 5)),
            (batch, g * g, 3 * p * p),
        )
        tokens = self.proj(patches)
        cls = self.cls.broadcast_to((batch, 1, tokens.shape[-1]))
        return concat([cls, tokens], axis=1) + self.pos
