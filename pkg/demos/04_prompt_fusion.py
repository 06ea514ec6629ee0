"""Fine-grained prompts and the fusion module.

Per layer, a handful of learnable prompt embeddings query the frozen selected
keys/values through cross-attention. The fused prompt rows ride through that
layer's side block and are dropped afterwards, so the side sequence never
grows and the cross-attention map stays (B, heads, P, S_sel).
"""

import numpy as np

from fpt.backbone import FrozenBackbone
from fpt.cache import compute_sample_features
from fpt.config import FptConfig
from fpt.data import build_dataset, normalize, resize_bilinear
from fpt.fusion import SideNetwork, ffm_forward
from fpt.numerics import Tensor

cfg = FptConfig().validate()
splits = build_dataset(cfg.data)
backbone = FrozenBackbone(cfg.backbone)
side = SideNetwork(cfg, cfg.side.image_size_low, use_fusion=True, seed=0)

print(f"side network: dim {side.dim} (backbone {cfg.backbone.dim} / k={cfg.side.reduction_factor}), "
      f"{side.heads} heads, {side.num_prompts} prompts per layer")
print(f"side tokens: ({cfg.side.image_size_low}/{cfg.backbone.patch_size})^2 + 1 = {side.num_tokens}")

batch = splits.train[:2]
features = compute_sample_features(batch, cfg, backbone, splits.normalization)

rng = np.random.default_rng(2)
z = Tensor(rng.normal(size=(2, side.num_tokens, side.dim)).astype(np.float32))
fused, ca_map = ffm_forward(z, features[0], side.prompts_for(0), side.fusion_layers[0],
                            heads=cfg.backbone.heads, return_attn=True)
print(f"\nffm: {z.shape} + {side.num_prompts} prompts -> {fused.shape}")
print(f"cross-attention map: {ca_map.shape} = (B, h_M, P, S_sel); "
      f"S_sel={features[0].keys.shape[2]} instead of N_M={cfg.backbone.num_tokens}")

out = side.layer_forward(0, z, features[0])
print(f"after the block the prompt rows are dropped: {out.shape} (length preserved)")

low = np.stack([normalize(resize_bilinear(s.image, cfg.side.image_size_low),
                          splits.normalization) for s in batch])
logits = side.forward(low, features)
print(f"\nfull side forward: low-res {low.shape} + {len(features)} feature sets "
      f"-> logits {logits.shape}")

# gradient flows to prompts and fusion projections, never to the backbone
from fpt.numerics import cross_entropy

cross_entropy(logits, np.array([s.label for s in batch])).backward()
print("prompt gradient norm:", float(np.linalg.norm(side.prompts[0].grad)))
print("backbone gradients:", "none" if all(
    p.grad is None for _, p in backbone.named_parameters()) else "LEAK")
