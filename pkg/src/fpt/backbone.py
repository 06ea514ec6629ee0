"""The frozen high-resolution encoder and its per-layer feature taps.

The backbone consumes the full-resolution image and exposes, for every layer,
the token activations, the self-attention map, and the post-projection per-head
key/value tensors so downstream fusion can reuse them without re-projection.
All weights are frozen; a forward pass allocates no gradient bookkeeping.

Desk-scale weights are randomly initialized from a fixed seed. Externally
trained weights can be imported from an FPTW container (JSON manifest plus raw
little-endian float32 arrays in declared order).
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import BackboneConfig
from .layers import Module, PatchEmbed, TransformerBlock
from .numerics import Tensor
from .tensorio import read_container, write_container

WEIGHTS_MAGIC = "FPTW"


class FreezeViolationError(RuntimeError):
    """A tensor that must stay frozen is learnable, changed, or acquired a gradient."""


@dataclass
class LayerTap:
    """One layer's reusable frozen features (plain float32 arrays)."""

    z: np.ndarray  # (B, N, d) activations after the block
    attn: np.ndarray  # (B, h, N, N) self-attention map, rows sum to 1
    keys: np.ndarray  # (B, h, N, d_h) post-projection per-head keys
    values: np.ndarray  # (B, h, N, d_h)


def bicubic_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) resampling matrix.

    Catmull-Rom kernel (a = -0.5) sampled at half-pixel centers with taps
    clamped to the edge. Rows sum to 1, so constants are preserved, and
    n_out == n_in yields the identity.
    """

    def kernel(t):
        t = abs(t)
        if t <= 1.0:
            return 1.5 * t**3 - 2.5 * t**2 + 1.0
        if t < 2.0:
            return -0.5 * t**3 + 2.5 * t**2 - 4.0 * t + 2.0
        return 0.0

    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        s = (i + 0.5) * scale - 0.5
        base = int(np.floor(s))
        frac = s - base
        for tap in range(-1, 3):
            idx = min(max(base + tap, 0), n_in - 1)
            mat[i, idx] += kernel(frac - tap)
    return mat


def interpolate_pos_embed(pos, target_grid):
    """Resample a (g*g, d) positional grid to (target_grid**2, d) bicubically.

    CLS handling is the caller's job; only grid positions belong here.
    """
    n, dim = pos.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"positional table of {n} rows is not a square grid")
    if target_grid == g:
        return np.asarray(pos).copy()
    field = np.asarray(pos, dtype=np.float64).reshape(g, g, dim)
    mat = bicubic_matrix(g, target_grid)
    out = np.einsum("oi,ijd->ojd", mat, field)
    out = np.einsum("oj,ijd->iod", mat, out)
    return out.reshape(target_grid * target_grid, dim).astype(pos.dtype)


class FrozenBackbone(Module):
    """Patch-embedding transformer encoder with every weight frozen."""

    def __init__(self, cfg: BackboneConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        pos_table = self._build_pos_table(cfg, rng, dtype)
        self.patch_embed = PatchEmbed(
            cfg.image_size_high, cfg.patch_size, cfg.dim, rng, dtype=dtype, pos_table=pos_table
        )
        self.blocks = [
            TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng, dtype=dtype,
                             qk_gain=cfg.qk_init_gain)
            for _ in range(cfg.layers)
        ]
        self.freeze()
        self.identity = self._weight_hash()

    @staticmethod
    def _build_pos_table(cfg, rng, dtype):
        # Positions are drawn at the pretrain grid, then resampled to the grid
        # implied by the high resolution, mirroring how pretrained weights get
        # adapted to a larger input.
        num_pretrain = cfg.pretrain_grid * cfg.pretrain_grid + 1
        table = rng.normal(0.0, 0.02, size=(num_pretrain, cfg.dim)).astype(dtype)
        if cfg.pretrain_grid == cfg.grid:
            return table
        grid_part = interpolate_pos_embed(table[1:], cfg.grid)
        return np.concatenate([table[:1], grid_part], axis=0)

    def _weight_hash(self):
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()[:16]

    def check_frozen(self):
        for name, p in self.named_parameters():
            if p.requires_grad:
                raise FreezeViolationError(f"backbone tensor {name} is not frozen")

    def forward(self, images):
        """Run the encoder and return one LayerTap per layer.

        images: (B, 3, H, H) float32. Raises FreezeViolationError if any weight
        became learnable; the pass itself builds no gradient tape.
        """
        self.check_frozen()
        x = self.patch_embed(Tensor(np.asarray(images, dtype=np.float32)))
        taps = []
        for block in self.blocks:
            x, attn, keys, values = block(x, return_internals=True)
            taps.append(LayerTap(z=x.data, attn=attn.data, keys=keys.data, values=values.data))
        return taps

    # -- weight import/export (FPTW) -----------------------------------

    def save_weights(self, path):
        cfg = self.cfg
        extra = {
            "layers": cfg.layers,
            "dim": cfg.dim,
            "heads": cfg.heads,
            "patch_size": cfg.patch_size,
            "image_size_high": cfg.image_size_high,
            "pretrain_grid": cfg.pretrain_grid,
        }
        arrays = [(name, p.data) for name, p in sorted(self.named_parameters())]
        write_container(path, WEIGHTS_MAGIC, extra, arrays)

    @classmethod
    def load_weights(cls, path, cfg: BackboneConfig, dtype=np.float32):
        extra, arrays = read_container(path, WEIGHTS_MAGIC)
        for field_name in ("layers", "dim", "heads", "patch_size", "image_size_high"):
            if extra[field_name] != getattr(cfg, field_name):
                raise ValueError(
                    f"weight file {field_name}={extra[field_name]} does not match config "
                    f"{getattr(cfg, field_name)}"
                )
        model = cls(cfg, dtype=dtype)
        for name, p in model.named_parameters():
            if name not in arrays:
                raise ValueError(f"weight file missing tensor {name}")
            loaded = arrays[name].astype(dtype)
            if loaded.shape != p.data.shape:
                raise ValueError(f"tensor {name}: shape {loaded.shape} != {p.data.shape}")
            p.data = loaded
            p.requires_grad = False
        model.identity = model._weight_hash()
        return model
