"""Frozen-feature preloading: compute once, train many times.

Because the high-resolution input is never augmented, every sample's frozen
features are constant across training. The cache stores the post-selection
keys/values per layer in a flat binary file; training then never touches the
backbone at all, and the bytes served are identical to a live recompute.
"""

import os
import tempfile

import numpy as np

from fpt.backbone import FrozenBackbone
from fpt.cache import FeatureCache, build_cache, compute_sample_features, config_hash
from fpt.config import FptConfig
from fpt.data import build_dataset

cfg = FptConfig().validate()
cfg.data.synth.num_samples = 60  # small demo set
splits = build_dataset(cfg.data)
backbone = FrozenBackbone(cfg.backbone)

print(f"config hash (architecture + selection rule + weights): "
      f"{config_hash(cfg, backbone.identity)}")

tmp = tempfile.mkdtemp()
path = os.path.join(tmp, "train.fptc")
manifest = build_cache(splits.train, cfg, backbone, splits.normalization, path,
                       dataset_digest=splits.digest)
size = os.path.getsize(path)
print(f"cached {manifest['sample_count']} samples, {size:,} bytes "
      f"({manifest['bytes_per_sample']:,} per sample: "
      f"{manifest['layers']} layers x (indices + keys + values) at s_sel={manifest['s_sel']})")

cache = FeatureCache(path).verify(cfg, backbone.identity, splits.digest)
entry = cache.load_entry(splits.train[0].id)
print(f"entry '{entry.sample_id}': {len(entry.keys)} layers, "
      f"keys[0] {entry.keys[0].shape}, indices[0][:6] = {entry.indices[0][:6]}")

live = compute_sample_features(splits.train[:1], cfg, backbone, splits.normalization)
same = all(
    live[layer].keys[0].tobytes() == entry.keys[layer].tobytes()
    for layer in range(cfg.backbone.layers)
)
print(f"cached bytes equal a live recompute: {same}")

# a rebuild is byte-identical; a config change makes the cache stale
path2 = os.path.join(tmp, "again.fptc")
build_cache(splits.train, cfg, backbone, splits.normalization, path2,
            dataset_digest=splits.digest)
print("rebuild is byte-identical:",
      open(path, "rb").read() == open(path2, "rb").read())

import copy

changed = copy.deepcopy(cfg)
changed.selection.ratio = 0.5
try:
    FeatureCache(path).verify(changed, backbone.identity, splits.digest)
except Exception as exc:
    print(f"changed selection ratio -> {type(exc).__name__}: refuses to serve stale features")
