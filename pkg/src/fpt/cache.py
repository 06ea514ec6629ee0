"""Persistent cache of the frozen path's per-layer selected key/value features.

Because the high-resolution input is never augmented, the backbone's features
for a sample are constant across training; computing them once and storing the
post-selection keys/values removes all backbone compute from the training loop.

File layout (one file per dataset split):

    magic "FPTC" | u32 version | u64 manifest_len | manifest JSON (UTF-8)
    | per sample, in manifest order:
        per layer: indices  uint32[s_sel]
                   keys     float32[heads * s_sel * head_dim]
                   values   float32[heads * s_sel * head_dim]

All arrays little-endian; the manifest records config hash, dataset digest, and
per-sample byte offsets into the data section, so access order is irrelevant.
Rebuilding with identical inputs produces byte-identical files. A hash mismatch
is a hard error: stale caches are never silently rebuilt.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import normalize, resize_bilinear
from .selection import SELECTION_RULE_VERSION, select_layer_features

CACHE_MAGIC = b"FPTC"
CACHE_VERSION = 1


class StaleCacheError(RuntimeError):
    """Cache bytes were produced under a different configuration or dataset."""


class CacheIOError(IOError):
    """Cache file could not be written or read back intact."""


@dataclass
class FeatureCacheEntry:
    """One sample's selected frozen features for every layer."""

    sample_id: str
    config_hash: str
    indices: list  # per layer: (s_sel,) uint32
    keys: list  # per layer: (heads, s_sel, head_dim) float32
    values: list  # per layer: same shape as keys


def config_hash(cfg, backbone_identity):
    """Digest over every field that affects cached bytes.

    Covers the frozen architecture, high-resolution input geometry, the
    selection rule and ratio, and the backbone weights. Side-network shape,
    prompts, and optimizer settings deliberately do not participate.
    """
    payload = {
        "image_size_high": cfg.backbone.image_size_high,
        "patch_size": cfg.backbone.patch_size,
        "layers": cfg.backbone.layers,
        "dim": cfg.backbone.dim,
        "heads": cfg.backbone.heads,
        "mlp_ratio": cfg.backbone.mlp_ratio,
        "pretrain_grid": cfg.backbone.pretrain_grid,
        "selection_ratio": cfg.selection.ratio,
        "keep_cls": cfg.selection.keep_cls,
        "per_layer": cfg.selection.per_layer,
        "selection_rule_version": SELECTION_RULE_VERSION,
        "backbone_identity": backbone_identity,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _frozen_input(sample, cfg, norm):
    """The exact bytes the backbone sees: deterministic resize + normalization."""
    resized = resize_bilinear(sample.image, cfg.backbone.image_size_high)
    return normalize(resized, norm)


def compute_sample_features(samples, cfg, backbone, norm, ratio=None):
    """Live frozen-path features for a batch: list per layer of LayerFusionFeatures."""
    ratio = cfg.selection.ratio if ratio is None else ratio
    images = np.stack([_frozen_input(s, cfg, norm) for s in samples], axis=0)
    taps = backbone.forward(images)
    return select_layer_features(
        taps, ratio, keep_cls=cfg.selection.keep_cls, per_layer=cfg.selection.per_layer
    )


def _features_and_indices(samples, cfg, backbone, norm, ratio):
    """One frozen pass giving both gathered features and the kept indices."""
    from .selection import gather_selected, select_topk, token_scores

    images = np.stack([_frozen_input(s, cfg, norm) for s in samples], axis=0)
    taps = backbone.forward(images)
    features = []
    indices = []
    shared = None
    if not cfg.selection.per_layer:
        shared = select_topk(token_scores(taps[-1].attn), ratio, keep_cls=cfg.selection.keep_cls)
    for layer_index, tap in enumerate(taps):
        sels = shared if shared is not None else select_topk(
            token_scores(tap.attn), ratio, keep_cls=cfg.selection.keep_cls
        )
        features.append(gather_selected(tap, sels, layer_index))
        indices.append([sel.indices for sel in sels])
    return features, indices


def entry_num_bytes(layers, s_sel, heads, head_dim):
    """On-disk bytes per sample: L * (indices + keys + values)."""
    per_layer = s_sel * 4 + 2 * heads * s_sel * head_dim * 4
    return layers * per_layer


def build_cache(samples, cfg, backbone, norm, out_path, dataset_digest="", ratio=None,
                batch_size=8):
    """Compute, select, and persist frozen features for every readable sample.

    Unreadable samples go to the manifest's skip list and the build continues;
    write failures abort and remove the partial file. Returns the manifest.
    """
    ratio = cfg.selection.ratio if ratio is None else ratio
    bb = cfg.backbone
    n_patch = bb.num_tokens - (1 if cfg.selection.keep_cls else 0)
    s_sel = (1 if cfg.selection.keep_cls else 0) + int(np.ceil(ratio * n_patch))
    per_sample = entry_num_bytes(bb.layers, s_sel, bb.heads, bb.head_dim)

    readable = []
    skipped = []
    for sample in samples:
        if sample.image is None or sample.image.ndim != 3 or sample.image.shape[0] != 3:
            skipped.append(sample.id)
        else:
            readable.append(sample)

    manifest = {
        "version": CACHE_VERSION,
        "config_hash": config_hash(cfg, backbone.identity),
        "dataset_digest": dataset_digest,
        "selection_ratio": ratio,
        "layers": bb.layers,
        "heads": bb.heads,
        "head_dim": bb.head_dim,
        "s_sel": s_sel,
        "dtype": "float32",
        "index_dtype": "uint32",
        "endianness": "little",
        "sample_count": len(readable),
        "bytes_per_sample": per_sample,
        "skipped": sorted(skipped),
        "samples": [
            {"id": s.id, "offset": i * per_sample, "length": per_sample}
            for i, s in enumerate(readable)
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")

    try:
        with open(out_path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<I", CACHE_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for start in range(0, len(readable), batch_size):
                batch = readable[start : start + batch_size]
                layer_features, indices = _features_and_indices(batch, cfg, backbone, norm, ratio)
                for j in range(len(batch)):
                    for layer in range(bb.layers):
                        feats = layer_features[layer]
                        fh.write(indices[layer][j].astype("<u4").tobytes())
                        fh.write(np.ascontiguousarray(feats.keys[j]).astype("<f4").tobytes())
                        fh.write(np.ascontiguousarray(feats.values[j]).astype("<f4").tobytes())
    except OSError as exc:
        if os.path.exists(out_path):
            os.remove(out_path)
        raise CacheIOError(f"cache build failed for {out_path}: {exc}") from exc

    sidecar = out_path + ".manifest.json"
    try:
        with open(sidecar, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        os.remove(out_path)
        raise CacheIOError(f"manifest write failed for {sidecar}: {exc}") from exc
    return manifest


class FeatureCache:
    """Random-access reader over one split's FPTC file.

    The file is immutable after build; offsets in the embedded manifest make
    lookup order irrelevant. `verify` refuses to serve features built under a
    different config or dataset.
    """

    def __init__(self, path):
        self.path = path
        try:
            with open(path, "rb") as fh:
                magic = fh.read(4)
                if magic != CACHE_MAGIC:
                    raise CacheIOError(f"{path}: bad magic {magic!r}")
                (version,) = struct.unpack("<I", fh.read(4))
                if version != CACHE_VERSION:
                    raise CacheIOError(f"{path}: unsupported cache version {version}")
                (manifest_len,) = struct.unpack("<Q", fh.read(8))
                self.manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
                self._data_start = 4 + 4 + 8 + manifest_len
        except OSError as exc:
            raise CacheIOError(f"cannot open cache {path}: {exc}") from exc
        self._offsets = {rec["id"]: rec["offset"] for rec in self.manifest["samples"]}

    def verify(self, cfg, backbone_identity, dataset_digest=None):
        expected = config_hash(cfg, backbone_identity)
        if self.manifest["config_hash"] != expected:
            raise StaleCacheError(
                f"cache {self.path} was built for config {self.manifest['config_hash']}, "
                f"current config is {expected}; rebuild with the cache command"
            )
        if dataset_digest is not None and self.manifest["dataset_digest"] != dataset_digest:
            raise StaleCacheError(
                f"cache {self.path} was built for a different dataset "
                f"({self.manifest['dataset_digest']} != {dataset_digest})"
            )
        return self

    def load_entry(self, sample_id):
        """Exact round-trip of one sample's stored tensors."""
        if sample_id not in self._offsets:
            raise KeyError(f"sample {sample_id!r} not in cache {self.path}")
        m = self.manifest
        layers, heads, head_dim, s_sel = m["layers"], m["heads"], m["head_dim"], m["s_sel"]
        feat_count = heads * s_sel * head_dim
        indices, keys, values = [], [], []
        with open(self.path, "rb") as fh:
            fh.seek(self._data_start + self._offsets[sample_id])
            for _ in range(layers):
                indices.append(np.frombuffer(fh.read(s_sel * 4), dtype="<u4").astype(np.uint32))
                keys.append(
                    np.frombuffer(fh.read(feat_count * 4), dtype="<f4")
                    .reshape(heads, s_sel, head_dim).astype(np.float32)
                )
                values.append(
                    np.frombuffer(fh.read(feat_count * 4), dtype="<f4")
                    .reshape(heads, s_sel, head_dim).astype(np.float32)
                )
        return FeatureCacheEntry(
            sample_id=sample_id, config_hash=m["config_hash"],
            indices=indices, keys=keys, values=values,
        )

    def features_for(self, sample_ids):
        """Batch-stack cached entries into per-layer LayerFusionFeatures."""
        from .selection import LayerFusionFeatures

        entries = [self.load_entry(sid) for sid in sample_ids]
        layers = self.manifest["layers"]
        return [
            LayerFusionFeatures(
                layer_index=layer,
                keys=np.stack([e.keys[layer] for e in entries], axis=0),
                values=np.stack([e.values[layer] for e in entries], axis=0),
            )
            for layer in range(layers)
        ]
