"""Important-token selection: rank tokens by the attention they receive.

A token's score is the column mean of the self-attention map (averaged over
heads and queries). Keeping the top 20% of patch tokens, plus CLS, shrinks the
frozen feature stream the fusion module has to touch by 5x.
"""

import numpy as np

from fpt.backbone import FrozenBackbone
from fpt.config import FptConfig
from fpt.data import build_dataset, normalize, resize_bilinear
from fpt.selection import gather_selected, select_topk, token_scores

cfg = FptConfig().validate()
splits = build_dataset(cfg.data)
backbone = FrozenBackbone(cfg.backbone)

sample = splits.train[0]
x = normalize(resize_bilinear(sample.image, cfg.backbone.image_size_high),
              splits.normalization)[None]
taps = backbone.forward(x)

scores = token_scores(taps[1].attn)
print(f"scores: shape {scores.shape}, sum {scores.sum():.6f} (a distribution over tokens)")

for ratio in (0.1, 0.2, 0.5, 1.0):
    sel = select_topk(scores, ratio, keep_cls=True)[0]
    print(f"ratio {ratio:4.1f}: keep {len(sel.indices):3d} of {scores.shape[1]} tokens "
          f"(CLS forced, ties to the lower index)")

sel = select_topk(scores, cfg.selection.ratio, keep_cls=True)
feats = gather_selected(taps[1], sel, layer_index=1)
print(f"gathered keys/values for the fusion module: {feats.keys.shape} "
      f"(was {taps[1].keys.shape})")

# the published full-scale configuration: 1024 patches at 20% -> 206 kept
full = np.random.default_rng(0).random((1, 1025))
kept = select_topk(full, 0.2, keep_cls=True)[0]
print(f"full-scale shape: 1 + ceil(0.2 * 1024) = {len(kept.indices)} kept tokens")
