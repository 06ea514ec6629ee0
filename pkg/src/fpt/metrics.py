"""Efficiency accounting: parameter counts, retained-activation model, PPE/PME.

Measured GPU megabytes are out of reach here, so training memory is modeled
analytically as the number of forward-pass elements that must be retained for
the backward pass. The model is versioned; see ACTIVATION_MODEL_VERSION.

Retained-activation model (version 1), per sample:

    block(T, d, h, r) = (7 + 2r) * T * d  +  h * T^2
        retained by one learnable pre-norm transformer block on T tokens of
        width d with h heads and MLP ratio r: block input, norm outputs
        feeding q/k/v, the q/k/v tensors, the h*T^2 attention probabilities,
        attention context, MLP input, and the two r*T*d MLP intermediates.

    ffm(P, d_s, d_m, h_m, S) = P*d_s + 2*P*d_m + h_m*P*S + 2*S*d_m
        retained by one fusion layer: prompts, lifted queries, the (h_m, P, S)
        cross-attention map, attended context, and the selected frozen
        keys/values held for the attention backward. Linear in S, so the
        selection ratio scales this term directly.

    embed(N, p) = (N - 1) * 3 * p^2      (patch pixels feeding the projection)
    tail(N, d)  = N * d + d              (final norm input and the CLS row)

The frozen backbone's forward retains nothing (no tape is built); its transient
working set is one layer's activations regardless of depth, reported separately
by frozen_transient_elements.

PPE and PME follow the published trade-off metric: score * exp(-log10(x + 1))
with x the learnable-parameter ratio (PPE) or the memory ratio against full
fine-tuning (PME), both as plain fractions.
"""

import math
from dataclasses import dataclass

from .config import FptConfig

ACTIVATION_MODEL_VERSION = 1


# -- parameter counting -------------------------------------------------------


def count_params(model, learnable_only=False):
    """Total elements over a model's tensors, optionally only requires_grad ones."""
    total = 0
    for _, p in model.named_parameters():
        if learnable_only and not p.requires_grad:
            continue
        total += p.size
    return total


def _embed_params(image_size, patch_size, dim):
    grid = image_size // patch_size
    proj = 3 * patch_size * patch_size * dim + dim
    return proj + dim + (grid * grid + 1) * dim  # projection + CLS + positions


def _block_params(dim, mlp_ratio):
    hidden = int(dim * mlp_ratio)
    norms = 2 * (2 * dim)
    attn = 4 * (dim * dim + dim)  # q, k, v, out projections
    mlp = dim * hidden + hidden + hidden * dim + dim
    return norms + attn + mlp


def param_counts(cfg: FptConfig, mode="fpt"):
    """Analytic shape inventory matching build_model; no tensors are allocated."""
    from .fusion import mode_settings

    bb = cfg.backbone
    side_res, _, use_fusion = mode_settings(cfg, mode)
    d_s = cfg.side.dim(bb)

    frozen = 0
    if use_fusion:
        frozen = _embed_params(bb.image_size_high, bb.patch_size, bb.dim)
        frozen += bb.layers * _block_params(bb.dim, bb.mlp_ratio)

    learnable = _embed_params(side_res, bb.patch_size, d_s)
    learnable += bb.layers * _block_params(d_s, bb.mlp_ratio)
    learnable += 2 * d_s  # final norm
    learnable += d_s * cfg.num_classes + cfg.num_classes  # head
    if use_fusion:
        prompt_sets = 1 if cfg.side.shared_prompts else bb.layers
        learnable += prompt_sets * cfg.side.num_prompts * d_s
        learnable += bb.layers * ((d_s * bb.dim + bb.dim) + (bb.dim * d_s + d_s))

    return {"learnable": learnable, "frozen": frozen, "total": learnable + frozen}


# -- retained-activation model -------------------------------------------------


def _block_elements(tokens, dim, heads, mlp_ratio):
    return int((7 + 2 * mlp_ratio) * tokens * dim + heads * tokens * tokens)


def _ffm_elements(num_prompts, d_side, d_backbone, heads_backbone, s_sel):
    return int(
        num_prompts * d_side
        + 2 * num_prompts * d_backbone
        + heads_backbone * num_prompts * s_sel
        + 2 * s_sel * d_backbone
    )


def selected_count(cfg: FptConfig, ratio):
    """Tokens surviving selection: CLS (if force-kept) + ceil(ratio * patches)."""
    n_patch = cfg.backbone.num_tokens - (1 if cfg.selection.keep_cls else 0)
    return (1 if cfg.selection.keep_cls else 0) + math.ceil(ratio * n_patch)


def activation_breakdown(cfg: FptConfig, mode):
    """Per-sample retained elements by component for a train mode.

    Modes are the four run modes plus "full_finetune", the baseline where the
    whole backbone trains on the high-resolution input.
    """
    from .fusion import mode_settings

    bb = cfg.backbone
    if mode == "full_finetune":
        tokens = bb.num_tokens
        blocks = bb.layers * _block_elements(tokens, bb.dim, bb.heads, bb.mlp_ratio)
        embed = (tokens - 1) * 3 * bb.patch_size**2
        tail = tokens * bb.dim + bb.dim
        out = {"blocks": blocks, "fusion": 0, "embed": embed, "tail": tail}
    else:
        side_res, ratio, use_fusion = mode_settings(cfg, mode)
        d_s = cfg.side.dim(bb)
        h_s = cfg.side.heads(bb)
        n_side = (side_res // bb.patch_size) ** 2 + 1
        num_prompts = cfg.side.num_prompts if use_fusion else 0
        tokens = n_side + num_prompts
        blocks = bb.layers * _block_elements(tokens, d_s, h_s, bb.mlp_ratio)
        fusion = 0
        if use_fusion and num_prompts > 0:
            s_sel = selected_count(cfg, ratio)
            fusion = bb.layers * _ffm_elements(num_prompts, d_s, bb.dim, bb.heads, s_sel)
        embed = (n_side - 1) * 3 * bb.patch_size**2
        tail = n_side * d_s + d_s
        out = {"blocks": blocks, "fusion": fusion, "embed": embed, "tail": tail}
    out["total"] = out["blocks"] + out["fusion"] + out["embed"] + out["tail"]
    out["model_version"] = ACTIVATION_MODEL_VERSION
    return out


def estimate_activation_memory(cfg: FptConfig, mode):
    """Per-sample element count retained for backward under the given mode."""
    return activation_breakdown(cfg, mode)["total"]


def frozen_transient_elements(cfg: FptConfig):
    """Working set of one frozen backbone layer; independent of depth.

    The frozen forward keeps no tape, so its peak extra storage is a constant
    number of single-layer activations: the token stream, q/k/v, one attention
    map, and one MLP intermediate.
    """
    bb = cfg.backbone
    tokens = bb.num_tokens
    return int(
        4 * tokens * bb.dim  # stream + q/k/v
        + bb.heads * tokens * tokens
        + int(bb.mlp_ratio) * tokens * bb.dim
    )


# -- trade-off metrics ---------------------------------------------------------


def ppe(score, r):
    """Performance-parameter efficiency: score * exp(-log10(r + 1)).

    r is the learnable-to-total parameter ratio as a fraction (published
    percentage tables divide by 100 first).
    """
    if r < 0:
        raise ValueError(f"parameter ratio must be >= 0, got {r}")
    return score * math.exp(-math.log10(r + 1.0))


def pme(score, m_mem):
    """Performance-memory efficiency; m_mem is memory relative to full fine-tuning."""
    if m_mem < 0:
        raise ValueError(f"memory ratio must be >= 0, got {m_mem}")
    return score * math.exp(-math.log10(m_mem + 1.0))


@dataclass
class EfficiencyReport:
    score: float  # mean AUC on the 0..100 scale
    learnable_ratio: float
    memory_ratio: float
    ppe: float
    pme: float

    @classmethod
    def build(cls, score, learnable_ratio, memory_ratio):
        return cls(
            score=score,
            learnable_ratio=learnable_ratio,
            memory_ratio=memory_ratio,
            ppe=ppe(score, learnable_ratio),
            pme=pme(score, memory_ratio),
        )


def render_table(rows, score_columns):
    """Aligned plain-text efficiency table.

    rows: dicts with name, params_pct, mem, scores (dict by column), avg, ppe,
    pme. The column set mirrors the published comparison table.
    """
    headers = ["Method", "Params.%", "Mem."] + list(score_columns) + ["Avg.", "PPE", "PME"]
    table = [headers]
    for row in rows:
        cells = [row["name"], f"{row['params_pct']:.2f}", f"{row['mem']:,.0f}"]
        for col in score_columns:
            value = row.get("scores", {}).get(col)
            cells.append("-" if value is None else f"{value:.2f}")
        cells += [f"{row['avg']:.2f}", f"{row['ppe']:.2f}", f"{row['pme']:.2f}"]
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, cells in enumerate(table):
        line = "  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(cells, widths)))
        lines.append(line)
        if i == 0:
            lines.append("-" * len(line))
    return "\n".join(lines)
