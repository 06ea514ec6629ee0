"""Important-token selection from self-attention maps.

A token's importance is the attention it receives: the column mean of the
self-attention map, averaged over heads and query positions. The top fraction
of patch tokens (plus CLS, kept outside the budget) feed the fusion module;
everything else is dropped from the frozen feature stream.

Selection runs on the frozen path only, so it is plain numpy and no gradient
flows through it.
"""

import math
from dataclasses import dataclass

import numpy as np

SELECTION_RULE_VERSION = 1


@dataclass
class TokenSelection:
    """Kept token positions for one sample, sorted ascending."""

    indices: np.ndarray  # (S_sel,) uint32, strictly increasing
    scores: np.ndarray  # (N,) importance of every token
    ratio: float


@dataclass
class LayerFusionFeatures:
    """One layer's frozen key/value features restricted to selected tokens."""

    layer_index: int
    keys: np.ndarray  # (B, h, S_sel, d_h)
    values: np.ndarray  # (B, h, S_sel, d_h)


def token_scores(attn_map):
    """Per-token attention received: column mean over heads and queries.

    attn_map: (B, h, N, N) with rows summing to 1; returns (B, N) scores that
    sum to 1 per sample.
    """
    attn_map = np.asarray(attn_map)
    if attn_map.ndim != 4 or attn_map.shape[-1] != attn_map.shape[-2]:
        raise ValueError(f"expected (B, h, N, N) attention map, got {attn_map.shape}")
    return attn_map.mean(axis=(1, 2))


def select_topk(scores, ratio, keep_cls=True):
    """Keep the top ceil(ratio * N_patch) patch tokens per sample by score.

    With keep_cls, index 0 is treated as CLS: always kept and excluded from the
    ratio budget. Ties break toward the lower index. Returns one TokenSelection
    per sample, indices sorted ascending.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"selection ratio must be in (0, 1], got {ratio}")
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"expected (B, N) scores, got {scores.shape}")
    num_tokens = scores.shape[1]
    start = 1 if keep_cls else 0
    num_patch = num_tokens - start
    keep = math.ceil(ratio * num_patch)
    selections = []
    for row in scores:
        patch_scores = row[start:]
        # Stable sort on negated scores: equal scores keep ascending index order.
        order = np.argsort(-patch_scores, kind="stable")[:keep] + start
        if keep_cls:
            kept = np.concatenate([[0], np.sort(order)])
        else:
            kept = np.sort(order)
        selections.append(
            TokenSelection(indices=kept.astype(np.uint32), scores=row.copy(), ratio=ratio)
        )
    return selections


def gather_selected(tap, selections, layer_index):
    """Slice a tap's keys/values down to each sample's kept tokens.

    All samples in a batch keep the same count, so the result stacks into
    (B, h, S_sel, d_h) arrays, order-preserving within each sample.
    """
    num_tokens = tap.keys.shape[2]
    keys = []
    values = []
    for sample, sel in enumerate(selections):
        idx = np.asarray(sel.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= num_tokens):
            raise IndexError(f"selection index out of range for {num_tokens} tokens")
        keys.append(tap.keys[sample][:, idx, :])
        values.append(tap.values[sample][:, idx, :])
    return LayerFusionFeatures(
        layer_index=layer_index,
        keys=np.stack(keys, axis=0),
        values=np.stack(values, axis=0),
    )


def select_layer_features(taps, ratio, keep_cls=True, per_layer=True):
    """Run scoring + selection + gathering over all taps of a forward pass.

    per_layer scores each layer from its own attention map; otherwise the final
    layer's map ranks tokens once and that ranking is reused everywhere.
    """
    features = []
    if per_layer:
        for layer_index, tap in enumerate(taps):
            sels = select_topk(token_scores(tap.attn), ratio, keep_cls=keep_cls)
            features.append(gather_selected(tap, sels, layer_index))
    else:
        sels = select_topk(token_scores(taps[-1].attn), ratio, keep_cls=keep_cls)
        for layer_index, tap in enumerate(taps):
            features.append(gather_selected(tap, sels, layer_index))
    return features
