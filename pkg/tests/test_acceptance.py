"""Acceptance suite: one test per exit criterion, each printing a PASS line.

Criteria:
  1. published efficiency arithmetic reproduces PPE/PME for all 8 rows (+-0.02)
  2. freeze contract after 5 fpt training steps
  3. finite-difference gradient checks, 20 seeds per op family
  4. bitwise cache-vs-live training equivalence over 3 steps
  5. selection equals the sort oracle exhaustively; published config keeps 206
  6. structural laws (constant side length, P=0 degeneration, CA map shape)
  7. analytic memory direction (asymmetric <= 0.5x, selection <= 0.25x fusion)
  8. synthetic fine-grained benefit: fpt >= side_only + 0.05 and >= 0.85 (3 seeds)
  9. ViT-B learnable ratio < 5%, printed, gap to the published 1.81% noted
"""

import copy
import math

import numpy as np
import pytest

from fpt.backbone import FrozenBackbone
from fpt.cache import FeatureCache, build_cache
from fpt.config import BackboneConfig, FptConfig, SideConfig, SynthSpec, vit_b_config
from fpt.data import build_dataset
from fpt.fusion import SideNetwork, build_model, ffm_forward
from fpt.metrics import (
    activation_breakdown,
    count_params,
    estimate_activation_memory,
    param_counts,
    pme,
    ppe,
    selected_count,
)
from fpt.numerics import AdamW, Tensor, cross_entropy, finite_diff_check, layer_norm, softmax
from fpt.numerics import scaled_dot_attention
from fpt.selection import LayerFusionFeatures, select_topk, token_scores
from fpt.trainer import train


def _report(criterion, detail):
    print(f"[PASS] acceptance {criterion}: {detail}")


def _small_cfg(num_samples=40, epochs=1, prompts=4):
    cfg = FptConfig()
    cfg.backbone = BackboneConfig(image_size_high=32, patch_size=8, dim=16, layers=2,
                                  heads=2, pretrain_grid=4, seed=61)
    cfg.side = SideConfig(image_size_low=16, reduction_factor=8, num_prompts=prompts)
    cfg.data.synth = SynthSpec(canvas=32, cue_size=4, num_classes=4,
                               num_samples=num_samples, seed=17)
    cfg.train.epochs = epochs
    cfg.train.batch_size = 8
    return cfg.validate()


# -- 1: metric arithmetic ---------------------------------------------------------


TABLE_ROWS = [
    ("full fine-tuning", 100.0, 24116, 93.96, 69.54, 69.54),
    ("linear probing", 0.01, 4364, 88.30, 88.30, 82.15),
    ("prompt tuning", 0.17, 21530, 89.04, 88.97, 67.49),
    ("attention tuning", 33.04, 21740, 89.13, 78.74, 67.42),
    ("adapter", 2.05, 20308, 89.16, 88.38, 68.39),
    ("bitfit", 0.12, 21330, 90.81, 90.76, 68.97),
    ("lora", 0.69, 21944, 91.01, 90.74, 68.72),
    ("fpt", 1.81, 3182, 92.26, 91.54, 87.42),
]


def test_acceptance_1_metric_arithmetic():
    baseline = 24116
    for name, params_pct, mem, avg, want_ppe, want_pme in TABLE_ROWS:
        got_ppe = ppe(avg, params_pct / 100.0)
        got_pme = pme(avg, mem / baseline)
        assert abs(got_ppe - want_ppe) <= 0.02, f"{name}: PPE {got_ppe} vs {want_ppe}"
        assert abs(got_pme - want_pme) <= 0.02, f"{name}: PME {got_pme} vs {want_pme}"
    _report(1, f"all {len(TABLE_ROWS)} published rows reproduce PPE/PME within +-0.02")


# -- 2: freeze contract -----------------------------------------------------------


def test_acceptance_2_freeze_contract():
    cfg = _small_cfg(num_samples=60, epochs=1)  # 60*0.7 = 42 train -> 5 steps of batch 8
    splits = build_dataset(cfg.data)
    model = build_model(cfg, "fpt")
    snapshot = {n: p.data.copy() for n, p in model.backbone.named_parameters()}

    from fpt.trainer import LiveFeatures, freeze_check

    src = LiveFeatures(cfg, model.backbone, splits.normalization, cfg.selection.ratio)
    report, model = train(cfg, splits, src, model=model)
    assert len(splits.train) // cfg.train.batch_size >= 5

    check = freeze_check(model)
    assert check.passed, check.failures
    for name, p in model.backbone.named_parameters():
        assert p.data.tobytes() == snapshot[name].tobytes(), f"{name} changed"
        assert p.grad is None

    learnable = {n for n, _ in model.learnable_tensors()}
    assert any("prompts" in n for n in learnable)
    assert any("f_in" in n for n in learnable)
    assert any("f_out" in n for n in learnable)
    assert any("head" in n for n in learnable)
    assert any("blocks" in n for n in learnable)
    assert all(n.startswith("side.") for n in learnable)
    _report(2, f"backbone bitwise frozen over {report.epoch_losses} epochs; "
               f"learnable set = side network + prompts + fusion + head")


# -- 3: gradient correctness -------------------------------------------------------


def test_acceptance_3_gradient_correctness():
    checks = 0

    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        w = Tensor(rng.normal(size=(3, 6)))
        err = finite_diff_check(lambda t: (softmax(t, axis=-1) * w).sum(),
                                rng.normal(size=(3, 6)))
        assert err < 1e-5, f"softmax seed {seed}: {err}"
        checks += 1

    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        k = rng.normal(size=(1, 2, 3, 4))
        v = rng.normal(size=(1, 2, 3, 4))
        w = Tensor(rng.normal(size=(1, 2, 2, 4)))

        def f(t):
            out, _ = scaled_dot_attention(t, Tensor(k), Tensor(v))
            return (out * w).sum()

        err = finite_diff_check(f, rng.normal(size=(1, 2, 2, 4)))
        assert err < 1e-5, f"attention seed {seed}: {err}"
        checks += 1

    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        g = Tensor(rng.normal(size=5))
        b = Tensor(rng.normal(size=5))
        w = Tensor(rng.normal(size=(2, 5)))
        err = finite_diff_check(lambda t: (layer_norm(t, g, b) * w).sum(),
                                rng.normal(size=(2, 5)))
        assert err < 1e-5, f"layer_norm seed {seed}: {err}"
        checks += 1

    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        from fpt.fusion import FusionLayer

        fl = FusionLayer(0, 2, 4, rng, dtype=np.float64)
        fl.f_out.weight.data = rng.normal(size=(4, 2))  # zero-init would mute the path
        feats = LayerFusionFeatures(
            layer_index=0,
            keys=rng.normal(size=(1, 1, 3, 4)),
            values=rng.normal(size=(1, 1, 3, 4)),
        )
        z = Tensor(rng.normal(size=(1, 2, 2)))
        w = Tensor(rng.normal(size=(1, 3, 2)))
        err = finite_diff_check(
            lambda t: (ffm_forward(z, feats, t, fl, heads=1) * w).sum(),
            rng.normal(size=(1, 2)),
        )
        assert err < 1e-5, f"ffm seed {seed}: {err}"
        checks += 1

    cfg = _small_cfg(prompts=2)
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        side = SideNetwork(cfg, cfg.side.image_size_low, use_fusion=True, seed=seed,
                           dtype=np.float64)
        feats = LayerFusionFeatures(
            layer_index=0,
            keys=rng.normal(size=(1, 2, 2, 8)),
            values=rng.normal(size=(1, 2, 2, 8)),
        )
        z0 = rng.normal(size=(1, 3, 2))
        w = Tensor(rng.normal(size=(1, 3, 2)))
        prompts = side.prompts[0]

        def through_layer(t):
            prompts.data = t.data.copy()
            prompts.requires_grad = t.requires_grad
            out = side.layer_forward(0, Tensor(z0), feats)
            return (out * w).sum()

        base = prompts.data.copy()
        leaf = Tensor(base.copy(), requires_grad=True)
        prompts.grad = None
        through_layer(leaf).backward()
        analytic = prompts.grad.copy()
        numeric = np.zeros_like(base)
        h = 1e-5
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            up = flat.copy(); up[i] += h
            dn = flat.copy(); dn[i] -= h
            hi = float(through_layer(Tensor(up.reshape(base.shape))).data)
            lo = float(through_layer(Tensor(dn.reshape(base.shape))).data)
            nflat[i] = (hi - lo) / (2 * h)
        rel = np.max(np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12))
        prompts.data = base
        prompts.requires_grad = True
        assert rel < 1e-5, f"side layer seed {seed}: {rel}"
        checks += 1

    _report(3, f"{checks} finite-difference checks passed at rel. error < 1e-5 (float64)")


# -- 4: cache equivalence ------------------------------------------------------------


def test_acceptance_4_cache_equivalence(tmp_path):
    cfg = _small_cfg(num_samples=40, epochs=1)  # 3+ steps of batch 8
    splits = build_dataset(cfg.data)
    backbone = FrozenBackbone(cfg.backbone)

    caches = {}
    for name in ("train", "val", "test"):
        path = str(tmp_path / f"{name}.fptc")
        build_cache(splits.split(name), cfg, backbone, splits.normalization, path,
                    dataset_digest=splits.digest)
        caches[name] = FeatureCache(path).verify(cfg, backbone.identity, splits.digest)

    class Routed:
        def features_for(self, samples):
            for cache in caches.values():
                if samples[0].id in cache._offsets:
                    return cache.features_for([s.id for s in samples])
            raise KeyError(samples[0].id)

    from fpt.trainer import LiveFeatures

    cached_report, _ = train(cfg, splits, Routed(), model=build_model(cfg, "fpt"))
    live_report, _ = train(
        cfg, splits,
        LiveFeatures(cfg, FrozenBackbone(cfg.backbone), splits.normalization,
                     cfg.selection.ratio),
        model=build_model(cfg, "fpt"),
    )
    assert cached_report.epoch_losses == live_report.epoch_losses
    assert cached_report.val_auc == live_report.val_auc
    steps = len(splits.train) // cfg.train.batch_size
    _report(4, f"{steps} training steps bitwise identical with cache vs live recompute")


# -- 5: selection oracle --------------------------------------------------------------


def test_acceptance_5_selection_oracle():
    def oracle(scores, ratio, keep_cls):
        start = 1 if keep_cls else 0
        order = sorted(range(start, len(scores)), key=lambda j: (-scores[j], j))
        kept = order[: math.ceil(ratio * (len(scores) - start))]
        return sorted(kept + ([0] if keep_cls else []))

    rng = np.random.default_rng(99)
    cases = 0
    for n in range(2, 65):
        scores = np.round(rng.random((1, n)), 1)  # coarse grid forces ties
        for k in range(1, 11):
            ratio = round(0.1 * k, 1)
            for keep_cls in (False, True):
                got = select_topk(scores, ratio, keep_cls=keep_cls)[0].indices
                np.testing.assert_array_equal(got, oracle(scores[0], ratio, keep_cls))
                cases += 1

    cfg = vit_b_config()
    assert selected_count(cfg, 0.2) == 206
    sel = select_topk(rng.random((1, 1025)), 0.2, keep_cls=True)[0]
    assert len(sel.indices) == 206
    _report(5, f"{cases} exhaustive small instances match the sort oracle; "
               f"published config keeps 206 of 1025 tokens")


# -- 6: structural laws ----------------------------------------------------------------


def test_acceptance_6_structural_laws():
    cfg = _small_cfg(prompts=5)
    rng = np.random.default_rng(7)

    # constant side sequence length across layers
    side = SideNetwork(cfg, cfg.side.image_size_low, use_fusion=True, seed=3)
    z = Tensor(rng.normal(size=(2, side.num_tokens, side.dim)).astype(np.float32))
    for layer in range(side.layers):
        feats = LayerFusionFeatures(
            layer_index=layer,
            keys=rng.normal(size=(2, 2, 3, 8)).astype(np.float32),
            values=rng.normal(size=(2, 2, 3, 8)).astype(np.float32),
        )
        z = side.layer_forward(layer, z, feats)
        assert z.shape[1] == side.num_tokens

    # P=0 reduces to a plain transformer classifier over the same blocks
    cfg0 = _small_cfg(prompts=0)
    with_fusion = SideNetwork(cfg0, cfg0.side.image_size_low, use_fusion=True, seed=4)
    plain = SideNetwork(cfg0, cfg0.side.image_size_low, use_fusion=False, seed=4)
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    dummy = [
        LayerFusionFeatures(layer_index=i,
                            keys=rng.normal(size=(2, 2, 3, 8)).astype(np.float32),
                            values=rng.normal(size=(2, 2, 3, 8)).astype(np.float32))
        for i in range(2)
    ]
    np.testing.assert_array_equal(with_fusion.forward(x, dummy).data,
                                  plain.forward(x).data)

    # CA map shape is (B, h_M, P, S_sel)
    from fpt.fusion import FusionLayer

    fl = FusionLayer(0, 2, 16, rng)
    feats = LayerFusionFeatures(layer_index=0,
                                keys=rng.normal(size=(3, 2, 6, 8)).astype(np.float32),
                                values=rng.normal(size=(3, 2, 6, 8)).astype(np.float32))
    _, attn = ffm_forward(Tensor(rng.normal(size=(3, 4, 2)).astype(np.float32)), feats,
                          Tensor(rng.normal(size=(5, 2)).astype(np.float32)), fl,
                          heads=2, return_attn=True)
    assert attn.shape == (3, 2, 5, 6)
    _report(6, "side length constant; P=0 degenerates to plain transformer; "
               "CA map is (B, h_M, P, S_sel)")


# -- 7: memory-model direction ------------------------------------------------------------


def test_acceptance_7_memory_direction():
    cfg = vit_b_config()
    no_sel = copy.deepcopy(cfg)
    no_sel.selection.ratio = 1.0
    symmetric = estimate_activation_memory(no_sel, "fpt_symmetric")
    asymmetric = estimate_activation_memory(no_sel, "fpt_no_selection")
    assert asymmetric <= 0.5 * symmetric

    cfg.selection.ratio = 0.2
    fusion_selected = activation_breakdown(cfg, "fpt")["fusion"]
    fusion_full = activation_breakdown(cfg, "fpt_no_selection")["fusion"]
    assert fusion_selected <= 0.25 * fusion_full
    _report(7, f"asymmetric/symmetric = {asymmetric / symmetric:.3f} <= 0.5; "
               f"fusion(m=0.2)/fusion(m=1.0) = {fusion_selected / fusion_full:.3f} <= 0.25")


# -- 8: end-to-end synthetic benefit ----------------------------------------------------


@pytest.mark.slow
def test_acceptance_8_synthetic_benefit(tmp_path):
    cfg = FptConfig().validate()  # desk defaults: canvas 128, cue 4, side 32
    assert cfg.data.synth.canvas == 128 and cfg.data.synth.cue_size == 4
    assert cfg.side.image_size_low == 32

    splits = build_dataset(cfg.data)
    backbone = FrozenBackbone(cfg.backbone)
    caches = {}
    for name in ("train", "val", "test"):
        path = str(tmp_path / f"{name}.fptc")
        build_cache(splits.split(name), cfg, backbone, splits.normalization, path,
                    dataset_digest=splits.digest)
        caches[name] = FeatureCache(path).verify(cfg, backbone.identity, splits.digest)

    class Routed:
        def features_for(self, samples):
            for cache in caches.values():
                if samples[0].id in cache._offsets:
                    return cache.features_for([s.id for s in samples])
            raise KeyError(samples[0].id)

    results = {}
    for mode in ("fpt", "side_only"):
        aucs = []
        for seed in (0, 1, 2):
            run_cfg = copy.deepcopy(cfg)
            run_cfg.train.seed = seed
            run_cfg.train.mode = mode
            source = Routed() if mode != "side_only" else None
            report, _ = train(run_cfg, splits, source, mode=mode)
            aucs.append(report.test_auc)
        results[mode] = float(np.mean(aucs))

    gap = results["fpt"] - results["side_only"]
    assert results["fpt"] >= results["side_only"] + 0.05, results
    assert results["fpt"] >= 0.85, results
    _report(8, f"mean test AUC over 3 seeds: fpt {results['fpt']:.3f} vs "
               f"side_only {results['side_only']:.3f} (gap {gap:+.3f})")


# -- 9: parameter-ratio report -------------------------------------------------------------


def test_acceptance_9_parameter_ratio():
    cfg = vit_b_config()
    assert cfg.side.reduction_factor == 8 and cfg.side.num_prompts == 16
    counts = param_counts(cfg, "fpt")
    ratio = counts["learnable"] / counts["total"]
    print(f"ViT-B shape: learnable {counts['learnable']:,} / total {counts['total']:,} "
          f"= {100 * ratio:.2f}% (published breakdown reaches 1.81%; this "
          f"dimensioning of f_in/f_out lands higher, as documented)")
    assert ratio < 0.05

    # the analytic inventory matches an instantiated model at desk scale
    small = _small_cfg()
    model = build_model(small, "fpt")
    assert count_params(model) == param_counts(small, "fpt")["total"]
    assert count_params(model, learnable_only=True) == param_counts(small, "fpt")["learnable"]
    _report(9, f"learnable ratio at ViT-B shape = {100 * ratio:.2f}% < 5%")
