"""Learnable side network with fine-grained prompts and cross-attention fusion.

Per layer, a small set of learnable prompt embeddings queries the frozen
backbone's selected key/value features through cross-attention (queries are
f_in(prompts), split into the backbone's heads). The fused prompt rows are
appended to the side sequence for that layer's block and discarded afterwards,
so the side sequence length never grows across layers and the cross-attention
map stays (B, h_M, P, S_sel) instead of scaling with the full token count.

Only the side network, prompts, fusion projections, and classification head are
learnable; checkpoints store exactly that set plus the backbone identity.
"""

import numpy as np

from .backbone import FrozenBackbone
from .config import FptConfig
from .layers import LayerNorm, Linear, Module, PatchEmbed, TransformerBlock
from .numerics import Tensor, broadcast_to, concat
from .numerics import reshape as t_reshape
from .numerics import scaled_dot_attention, take, transpose
from .tensorio import read_container, write_container

CHECKPOINT_MAGIC = "FPTS"


class FusionLayer(Module):
    """Dimension-aligning projections around one layer's cross-attention.

    f_in lifts prompts from side width to backbone width (they become the CA
    queries); f_out brings the attended context back down. The key/value
    projections are NOT here: they are reused frozen from the backbone.
    f_out starts at zero so training begins as a pure side network.
    """

    def __init__(self, layer_index, d_side, d_backbone, rng, dtype=np.float32):
        self.layer_index = layer_index
        self.f_in = Linear(d_side, d_backbone, rng, dtype=dtype)
        self.f_out = Linear(d_backbone, d_side, rng, dtype=dtype, zero_init=True)


def ffm_forward(z_side, fused, prompts, fusion_layer, heads, return_attn=False):
    """Fuse frozen features into prompt rows and append them to the sequence.

    z_side: (B, N_S, d_S); fused: LayerFusionFeatures with (B, h, S_sel, d_h)
    keys/values; prompts: (P, d_S). Returns (B, N_S + P, d_S): the first N_S
    rows are z_side unchanged, the last P rows are f_out(CA(prompts, ...)) plus
    the prompt residual.
    """
    if fused.layer_index != fusion_layer.layer_index:
        raise ValueError(
            f"fusion features are for layer {fused.layer_index}, "
            f"weights for layer {fusion_layer.layer_index}"
        )
    num_prompts = prompts.shape[0]
    if num_prompts == 0:
        return (z_side, None) if return_attn else z_side
    batch = z_side.shape[0]
    head_dim = fused.keys.shape[-1]

    q = fusion_layer.f_in(prompts)  # (P, d_M)
    q = transpose(t_reshape(q, (1, num_prompts, heads, head_dim)), (0, 2, 1, 3))
    q = broadcast_to(q, (batch, heads, num_prompts, head_dim))
    context, attn = scaled_dot_attention(q, Tensor(fused.keys), Tensor(fused.values))
    context = t_reshape(transpose(context, (0, 2, 1, 3)), (batch, num_prompts, heads * head_dim))
    prompt_rows = fusion_layer.f_out(context) + prompts
    out = concat([z_side, prompt_rows], axis=1)
    return (out, attn) if return_attn else out


class SideNetwork(Module):
    """Low-resolution learnable transformer classifier fed by per-layer fusion."""

    def __init__(self, cfg: FptConfig, image_size, use_fusion, seed, dtype=np.float32):
        bb = cfg.backbone
        side = cfg.side
        self.dim = side.dim(bb)
        self.heads = side.heads(bb)
        self.backbone_heads = bb.heads
        self.layers = bb.layers
        self.num_prompts = side.num_prompts if use_fusion else 0
        self.use_fusion = use_fusion
        self.shared_prompts = side.shared_prompts

        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(image_size, bb.patch_size, self.dim, rng, dtype=dtype)
        self.num_tokens = self.patch_embed.num_tokens
        self.blocks = [
            TransformerBlock(self.dim, self.heads, bb.mlp_ratio, rng, dtype=dtype,
                             dropout_p=side.dropout)
            for _ in range(self.layers)
        ]
        if use_fusion:
            prompt_sets = 1 if side.shared_prompts else self.layers
            self.prompts = [
                Tensor(rng.normal(0.0, 0.02, size=(self.num_prompts, self.dim)).astype(dtype),
                       requires_grad=True)
                for _ in range(prompt_sets)
            ]
            self.fusion_layers = [
                FusionLayer(i, self.dim, bb.dim, rng, dtype=dtype) for i in range(self.layers)
            ]
        else:
            self.prompts = []
            self.fusion_layers = []
        self.final_norm = LayerNorm(self.dim, dtype=dtype)
        self.head = Linear(self.dim, cfg.num_classes, rng, dtype=dtype, zero_init=True)

    def prompts_for(self, layer_index):
        if not self.use_fusion:
            return None
        return self.prompts[0] if self.shared_prompts else self.prompts[layer_index]

    def layer_forward(self, layer_index, z_side, fused, rng=None):
        """One side layer: fuse, run the block, drop the trailing prompt rows."""
        n_side = z_side.shape[1]
        if self.use_fusion and self.num_prompts > 0:
            if fused is None:
                raise ValueError(f"layer {layer_index} needs fusion features")
            z = ffm_forward(
                z_side, fused, self.prompts_for(layer_index),
                self.fusion_layers[layer_index], self.backbone_heads,
            )
        else:
            z = z_side
        z = self.blocks[layer_index](z, rng=rng)
        if z.shape[1] != n_side:
            z = take(z, (slice(None), slice(0, n_side)))
        return z

    def forward(self, images, features=None, rng=None):
        """Classify a batch: (B, 3, h, h) images plus per-layer fusion features.

        features must hold exactly one LayerFusionFeatures per layer when
        fusion is enabled; logits come from the final CLS token.
        """
        if self.use_fusion and self.num_prompts > 0:
            if features is None or len(features) != self.layers:
                got = 0 if features is None else len(features)
                raise ValueError(f"expected {self.layers} fusion feature sets, got {got}")
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        z = self.patch_embed(x)
        for layer_index in range(self.layers):
            fused = features[layer_index] if features is not None else None
            z = self.layer_forward(layer_index, z, fused, rng=rng)
        z = self.final_norm(z)
        cls = take(z, (slice(None), 0))
        return self.head(cls)


class FptModel(Module):
    """Frozen backbone (optional) plus the learnable side network."""

    def __init__(self, backbone, side):
        self.backbone = backbone if backbone is not None else _Empty()
        self.side = side
        self._frozen_digests = self._digest_frozen()

    @property
    def has_backbone(self):
        return not isinstance(self.backbone, _Empty)

    def _digest_frozen(self):
        import hashlib

        digests = {}
        if self.has_backbone:
            for name, p in self.backbone.named_parameters(prefix="backbone."):
                digests[name] = hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
        return digests

    def frozen_tensors(self):
        if not self.has_backbone:
            return []
        return list(self.backbone.named_parameters(prefix="backbone."))

    def learnable_tensors(self):
        return [(n, p) for n, p in self.side.named_parameters(prefix="side.") if p.requires_grad]


class _Empty(Module):
    pass


def mode_settings(cfg: FptConfig, mode):
    """Resolve a train mode to (side input resolution, selection ratio, use_fusion)."""
    if mode == "side_only":
        return cfg.side.image_size_low, None, False
    if mode == "fpt":
        return cfg.side.image_size_low, cfg.selection.ratio, True
    if mode == "fpt_no_selection":
        return cfg.side.image_size_low, 1.0, True
    if mode == "fpt_symmetric":
        return cfg.backbone.image_size_high, cfg.selection.ratio, True
    raise ValueError(f"unknown mode {mode!r}")


def build_model(cfg: FptConfig, mode=None, dtype=np.float32):
    """Instantiate the model a train mode needs; side init follows the run seed."""
    mode = mode or cfg.train.mode
    side_res, _, use_fusion = mode_settings(cfg, mode)
    backbone = FrozenBackbone(cfg.backbone, dtype=dtype) if use_fusion else None
    side = SideNetwork(cfg, side_res, use_fusion, seed=cfg.train.seed + 10_000, dtype=dtype)
    return FptModel(backbone, side)


# -- checkpointing ---------------------------------------------------------


def save_checkpoint(path, model: FptModel, cfg: FptConfig):
    """Persist only the learnable state plus enough metadata to rebuild."""
    extra = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "backbone_identity": model.backbone.identity if model.has_backbone else None,
    }
    arrays = [(name, p.data) for name, p in sorted(model.learnable_tensors())]
    write_container(path, CHECKPOINT_MAGIC, extra, arrays)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (model, cfg) from a checkpoint; backbone comes from its seed."""
    extra, arrays = read_container(path, CHECKPOINT_MAGIC)
    cfg = FptConfig.from_dict(extra["config"])
    model = build_model(cfg, cfg.train.mode, dtype=dtype)
    if model.has_backbone and extra["backbone_identity"] != model.backbone.identity:
        raise ValueError(
            "checkpoint was trained against a different backbone "
            f"({extra['backbone_identity']} != {model.backbone.identity})"
        )
    for name, p in model.learnable_tensors():
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor {name}")
        loaded = arrays[name].astype(dtype)
        if loaded.shape != p.data.shape:
            raise ValueError(f"tensor {name}: shape {loaded.shape} != {p.data.shape}")
        p.data = loaded
    return model, cfg
