"""Built-in invariant battery behind the `fpt selftest` subcommand.

A quick structural sanity pass (seconds, not the full pytest suite): gradient
checks on the core ops, the selection oracle on small instances, the published
efficiency arithmetic, and a cache round-trip in a temp directory.
"""

import math
import tempfile

import numpy as np

from .backbone import FrozenBackbone
from .cache import FeatureCache, build_cache, config_hash
from .config import BackboneConfig, FptConfig, SideConfig, SynthSpec
from .data import build_dataset, resize_bilinear
from .metrics import pme, ppe
from .numerics import Tensor, cross_entropy, finite_diff_check, layer_norm, softmax
from .selection import select_topk


def _tiny_config():
    cfg = FptConfig()
    cfg.backbone = BackboneConfig(image_size_high=32, patch_size=8, dim=16,
                                  layers=2, heads=2, pretrain_grid=4)
    cfg.side = SideConfig(image_size_low=16, reduction_factor=8, num_prompts=2)
    cfg.data.synth = SynthSpec(canvas=32, cue_size=4, num_classes=4, num_samples=24, seed=5)
    return cfg.validate()


def _checks():
    yield "softmax rows sum to 1", _check_softmax
    yield "gradients match finite differences", _check_gradients
    yield "top-k selection equals sort oracle", _check_selection
    yield "published PPE/PME arithmetic", _check_ppe_pme
    yield "bilinear resize half-pixel example", _check_resize
    yield "cache round-trip and hash rule", _check_cache


def _check_softmax():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(3, 7)).astype(np.float32)
        s = softmax(Tensor(x), axis=-1).data
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert (s >= 0).all()


def _check_gradients():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5))
    err = finite_diff_check(lambda t: softmax(t, axis=-1).sum(axis=0)[0], x)
    assert err < 1e-6, err
    labels = np.array([1, 3])
    err = finite_diff_check(lambda t: cross_entropy(t, labels), rng.normal(size=(2, 4)))
    assert err < 1e-6, err
    g = Tensor(np.ones(5, dtype=np.float64))
    b = Tensor(np.zeros(5, dtype=np.float64))
    w = Tensor(rng.normal(size=(3, 5)))  # random projection; sum alone is identically 0
    err = finite_diff_check(lambda t: (layer_norm(t, g, b) * w).sum(), rng.normal(size=(3, 5)))
    assert err < 1e-5, err


def _check_selection():
    rng = np.random.default_rng(2)
    for n in (4, 9, 17):
        scores = rng.random((1, n))
        for ratio in (0.1, 0.5, 1.0):
            sel = select_topk(scores, ratio, keep_cls=False)[0]
            keep = math.ceil(ratio * n)
            oracle = np.sort(np.argsort(-scores[0], kind="stable")[:keep])
            assert np.array_equal(sel.indices, oracle.astype(np.uint32))


def _check_ppe_pme():
    assert abs(ppe(93.96, 1.0) - 69.54) <= 0.02
    assert abs(ppe(92.26, 0.0181) - 91.54) <= 0.02
    assert abs(pme(92.26, 3182 / 24116) - 87.42) <= 0.02
    assert abs(pme(88.30, 4364 / 24116) - 82.15) <= 0.02


def _check_resize():
    block = np.array([[[0, 0], [100, 100]]] * 3, dtype=np.uint8)
    out = resize_bilinear(block, 1)
    assert np.allclose(out, 50.0)


def _check_cache():
    cfg = _tiny_config()
    splits = build_dataset(cfg.data)
    backbone = FrozenBackbone(cfg.backbone)
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/train.fptc"
        build_cache(splits.train, cfg, backbone, splits.normalization, path,
                    dataset_digest=splits.digest)
        cache = FeatureCache(path).verify(cfg, backbone.identity, splits.digest)
        entry = cache.load_entry(splits.train[0].id)
        assert entry.config_hash == config_hash(cfg, backbone.identity)
        assert len(entry.keys) == cfg.backbone.layers


def run_selftest(verbose=True):
    passed = True
    for name, check in _checks():
        try:
            check()
            status = "PASS"
        except Exception as exc:  # noqa: BLE001 - report every failure
            status = f"FAIL ({exc})"
            passed = False
        if verbose:
            print(f"[{status.split()[0]:4}] {name}" + ("" if status == "PASS" else f": {status}"))
    return passed
