"""Frozen backbone: sequence-length law, positional interpolation against a
naive bicubic oracle, freeze contract, determinism, and a full hand-evaluated
single-layer forward."""

import math

import numpy as np
import pytest

from fpt.backbone import (
    FreezeViolationError,
    FrozenBackbone,
    bicubic_matrix,
    interpolate_pos_embed,
)
from fpt.config import BackboneConfig


def _small_cfg(**kwargs):
    defaults = dict(image_size_high=32, patch_size=8, dim=16, layers=2, heads=2,
                    pretrain_grid=4, seed=11)
    defaults.update(kwargs)
    return BackboneConfig(**defaults)


# -- patch embedding ----------------------------------------------------------


def test_token_count_512_16():
    cfg = BackboneConfig(image_size_high=512, patch_size=16, dim=32, layers=1, heads=2,
                         pretrain_grid=32)
    assert cfg.num_tokens == 32 * 32 + 1 == 1025


def test_token_count_224_16():
    cfg = BackboneConfig(image_size_high=224, patch_size=16, dim=32, layers=1, heads=2,
                         pretrain_grid=14)
    assert cfg.num_tokens == 14 * 14 + 1 == 197


@pytest.mark.parametrize("size,patch", [(32, 8), (64, 8), (48, 16)])
def test_sequence_length_law(size, patch):
    cfg = _small_cfg(image_size_high=size, patch_size=patch, pretrain_grid=size // patch)
    bb = FrozenBackbone(cfg)
    taps = bb.forward(np.zeros((1, 3, size, size), dtype=np.float32))
    expected = (size // patch) ** 2 + 1
    assert all(t.z.shape[1] == expected for t in taps)


def test_empty_batch_is_fine():
    cfg = _small_cfg()
    bb = FrozenBackbone(cfg)
    taps = bb.forward(np.zeros((0, 3, 32, 32), dtype=np.float32))
    assert taps[0].z.shape == (0, cfg.num_tokens, cfg.dim)


def test_indivisible_resolution_rejected():
    from fpt.config import ConfigError

    with pytest.raises(ConfigError):
        _small_cfg(image_size_high=30).validate()


# -- positional interpolation ---------------------------------------------------


def test_interpolation_identity():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(9, 5)).astype(np.float32)
    np.testing.assert_array_equal(interpolate_pos_embed(pos, 3), pos)


def test_interpolation_preserves_constants():
    pos = np.full((4, 6), 2.5, dtype=np.float32)
    out = interpolate_pos_embed(pos, 5)
    assert out.shape == (25, 6)
    np.testing.assert_allclose(out, 2.5, atol=1e-6)


def _naive_bicubic_1d(values, n_out):
    """Independent oracle: per-output-pixel loop over the 4-tap Catmull-Rom kernel."""

    def kernel(t):
        t = abs(t)
        if t <= 1:
            return 1.5 * t**3 - 2.5 * t**2 + 1
        if t < 2:
            return -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
        return 0.0

    n_in = len(values)
    out = np.zeros(n_out)
    for i in range(n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        base = math.floor(s)
        for tap in range(-1, 3):
            idx = min(max(base + tap, 0), n_in - 1)
            out[i] += kernel(s - base - tap) * values[idx]
    return out


def test_bicubic_matrix_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for n_in, n_out in [(2, 4), (4, 7), (5, 3), (8, 8)]:
        values = rng.normal(size=n_in)
        expected = _naive_bicubic_1d(values, n_out)
        np.testing.assert_allclose(bicubic_matrix(n_in, n_out) @ values, expected, atol=1e-12)


def test_grid_interpolation_matches_separable_oracle():
    # 2x2 grid -> 4x4: oracle applies the naive 1-D resampler along each axis.
    rng = np.random.default_rng(2)
    field = rng.normal(size=(2, 2, 3))
    rows = np.stack([
        np.stack([_naive_bicubic_1d(field[:, j, d], 4) for d in range(3)], axis=-1)
        for j in range(2)
    ], axis=1)  # (4, 2, 3)
    expected = np.stack([
        np.stack([_naive_bicubic_1d(rows[i, :, d], 4) for d in range(3)], axis=-1)
        for i in range(4)
    ], axis=0)  # (4, 4, 3)
    got = interpolate_pos_embed(field.reshape(4, 3), 4).reshape(4, 4, 3)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_backbone_interpolates_pretrain_grid():
    cfg = _small_cfg(image_size_high=64, pretrain_grid=4)  # grid 8 from a 4x4 table
    bb = FrozenBackbone(cfg)
    assert bb.patch_embed.pos.shape == (65, cfg.dim)


# -- freeze contract and determinism ----------------------------------------------


def test_all_weights_frozen_and_no_tape():
    bb = FrozenBackbone(_small_cfg())
    assert all(not p.requires_grad for _, p in bb.named_parameters())
    taps = bb.forward(np.ones((2, 3, 32, 32), dtype=np.float32))
    assert all(p.grad is None for _, p in bb.named_parameters())
    assert len(taps) == 2


def test_forward_rejects_unfrozen_weight():
    bb = FrozenBackbone(_small_cfg())
    next(iter(bb.named_parameters()))[1].requires_grad = True
    with pytest.raises(FreezeViolationError):
        bb.forward(np.zeros((1, 3, 32, 32), dtype=np.float32))


def test_forward_bit_deterministic():
    bb = FrozenBackbone(_small_cfg())
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    taps_a = bb.forward(x)
    taps_b = bb.forward(x)
    for a, b in zip(taps_a, taps_b):
        assert a.z.tobytes() == b.z.tobytes()
        assert a.attn.tobytes() == b.attn.tobytes()
        assert a.keys.tobytes() == b.keys.tobytes()
        assert a.values.tobytes() == b.values.tobytes()


def test_attention_rows_sum_to_one():
    bb = FrozenBackbone(_small_cfg())
    rng = np.random.default_rng(4)
    taps = bb.forward(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
    for tap in taps:
        np.testing.assert_allclose(tap.attn.sum(axis=-1), 1.0, atol=1e-6)


def test_same_seed_same_identity():
    assert FrozenBackbone(_small_cfg()).identity == FrozenBackbone(_small_cfg()).identity
    assert FrozenBackbone(_small_cfg()).identity != FrozenBackbone(_small_cfg(seed=12)).identity


# -- hand-evaluated single layer -----------------------------------------------------


def test_single_layer_manual_forward_oracle():
    """L=1, d=4, one head, 2x2-patch image: every step recomputed with plain numpy."""
    cfg = BackboneConfig(image_size_high=4, patch_size=2, dim=4, layers=1, heads=1,
                         mlp_ratio=1.0, pretrain_grid=2, seed=5, qk_init_gain=1.0)
    bb = FrozenBackbone(cfg)
    rng = np.random.default_rng(6)
    image = rng.normal(size=(1, 3, 4, 4)).astype(np.float32)

    # Hand path, float64 throughout, reading weights off the model.
    pe = bb.patch_embed
    p = 2
    patches = image.reshape(1, 3, 2, p, 2, p).transpose(0, 2, 4, 1, 3, 5).reshape(1, 4, 12)
    tokens = patches.astype(np.float64) @ pe.proj.weight.data.astype(np.float64)
    tokens += pe.proj.bias.data
    x = np.concatenate([np.broadcast_to(pe.cls.data, (1, 1, 4)), tokens], axis=1) + pe.pos.data

    def ln(v, gain, bias, eps=1e-5):
        mu = v.mean(-1, keepdims=True)
        var = v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * gain + bias

    blk = bb.blocks[0]
    h = ln(x, blk.norm1.gain.data, blk.norm1.bias.data)
    q = h @ blk.attn.q_proj.weight.data + blk.attn.q_proj.bias.data
    k = h @ blk.attn.k_proj.weight.data + blk.attn.k_proj.bias.data
    v = h @ blk.attn.v_proj.weight.data + blk.attn.v_proj.bias.data
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(4.0)
    attn = np.exp(logits - logits.max(-1, keepdims=True))
    attn /= attn.sum(-1, keepdims=True)
    ctx = attn @ v
    x = x + (ctx @ blk.attn.out_proj.weight.data + blk.attn.out_proj.bias.data)
    h2 = ln(x, blk.norm2.gain.data, blk.norm2.bias.data)
    from scipy.special import erf

    hidden = h2 @ blk.mlp.fc1.weight.data + blk.mlp.fc1.bias.data
    hidden = 0.5 * hidden * (1 + erf(hidden / math.sqrt(2)))
    expected = x + (hidden @ blk.mlp.fc2.weight.data + blk.mlp.fc2.bias.data)

    tap = bb.forward(image)[0]
    np.testing.assert_allclose(tap.z, expected, atol=1e-4)
    np.testing.assert_allclose(tap.attn[:, 0], attn, atol=1e-5)
    np.testing.assert_allclose(tap.keys[:, 0], k, atol=1e-4)
    np.testing.assert_allclose(tap.values[:, 0], v, atol=1e-4)


# -- weight import/export --------------------------------------------------------


def test_weight_roundtrip(tmp_path):
    cfg = _small_cfg()
    bb = FrozenBackbone(cfg)
    path = str(tmp_path / "weights.fptw")
    bb.save_weights(path)
    loaded = FrozenBackbone.load_weights(path, cfg)
    assert loaded.identity == bb.identity
    for (na, pa), (nb, pb) in zip(sorted(bb.named_parameters()), sorted(loaded.named_parameters())):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
        assert not pb.requires_grad


def test_weight_import_rejects_mismatched_config(tmp_path):
    cfg = _small_cfg()
    FrozenBackbone(cfg).save_weights(str(tmp_path / "w.fptw"))
    other = _small_cfg(dim=32)
    with pytest.raises(ValueError):
        FrozenBackbone.load_weights(str(tmp_path / "w.fptw"), other)
