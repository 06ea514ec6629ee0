"""Image pipeline and the synthetic fine-grained dataset.

Two paths leave this module. The frozen path is a pure function of the stored
image: deterministic bilinear resize to the high resolution, then per-channel
normalization with training-split statistics. The side path additionally gets
stochastic augmentation (horizontal flip, random resized crop) before its
resize, so cached frozen features stay valid while training samples vary.

The synthetic dataset plants one tiny class-determining textured cue on a
near-uniform noise canvas. Cues are balanced black/white patterns, so
downsampling to the side resolution averages them into the background and the
class signal survives only on the high-resolution path.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import ConfigError, DataConfig, SynthSpec


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) uint8
    label: int


@dataclass
class Normalization:
    mean: np.ndarray  # (3,) on the 0..1 scale
    std: np.ndarray  # (3,)


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list
    class_names: list
    normalization: Normalization = None
    digest: str = ""

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


# -- resizing and augmentation ---------------------------------------------


def _linear_matrix(n_in, n_out):
    """(n_out, n_in) bilinear weights at half-pixel centers, taps edge-clamped."""
    mat = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for i in range(n_out):
        s = (i + 0.5) * scale - 0.5
        base = int(np.floor(s))
        frac = s - base
        lo = min(max(base, 0), n_in - 1)
        hi = min(max(base + 1, 0), n_in - 1)
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def resize_bilinear(image, target):
    """Resize (3, H, W) to (3, target, target); float32 output clamped to [0, 255]."""
    if target < 1:
        raise ValueError("target size must be >= 1")
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if (h, w) == (target, target):
        return img.copy()
    rows = _linear_matrix(h, target)
    cols = _linear_matrix(w, target)
    out = np.einsum("oi,cij->coj", rows, img)
    out = np.einsum("pj,coj->cop", cols, out)
    return np.clip(out, 0.0, 255.0)


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[:, :, ::-1])


def augment_low(image, rng, target, flip_prob=0.5, scale_range=(0.8, 1.0)):
    """Side-network input augmentation: flip + random resized crop, then resize.

    The crop keeps a square window whose area is a uniform fraction of the
    source; the frozen path never sees this function.
    """
    img = np.asarray(image)
    if rng.random() < flip_prob:
        img = hflip(img)
    lo, hi = scale_range
    area = rng.uniform(lo, hi)
    _, h, w = img.shape
    side = max(1, int(round(np.sqrt(area) * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[:, top : top + side, left : left + side]
    return resize_bilinear(crop, target)


def normalize(image, norm: Normalization):
    """Map 0..255 float pixels to normalized floats using train-split stats."""
    x = np.asarray(image, dtype=np.float32) / 255.0
    return (x - norm.mean[:, None, None]) / norm.std[:, None, None]


def compute_normalization(samples):
    """Per-channel mean/std of the training split on the 0..1 scale."""
    if not samples:
        raise ValueError("cannot normalize an empty training split")
    acc = np.zeros(3, dtype=np.float64)
    acc_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for sample in samples:
        x = sample.image.astype(np.float64) / 255.0
        acc += x.sum(axis=(1, 2))
        acc_sq += (x * x).sum(axis=(1, 2))
        count += x.shape[1] * x.shape[2]
    mean = acc / count
    var = acc_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, 1e-8))
    return Normalization(mean=mean.astype(np.float32), std=std.astype(np.float32))


# -- synthetic fine-grained dataset ----------------------------------------


def make_cue_patterns(spec: SynthSpec, rng):
    """One balanced 0/255 texture per class, pairwise far in Hamming distance."""
    size = spec.cue_size
    pixels = size * size
    half = pixels // 2
    patterns = []
    attempts = 0
    while len(patterns) < spec.num_classes:
        attempts += 1
        if attempts > 10_000:
            raise ConfigError("could not draw distinct cue patterns; enlarge cue or reduce classes")
        flat = np.zeros(pixels, dtype=np.uint8)
        on = rng.choice(pixels, size=half, replace=False)
        flat[on] = 1
        if all(np.sum(flat != p.reshape(-1)) >= max(2, pixels // 4) for p in patterns):
            patterns.append(flat.reshape(size, size))
    return [p * np.uint8(255) for p in patterns]


def synth_generate(spec: SynthSpec):
    """Deterministic synthetic dataset: list of Samples, classes balanced +/- 1."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    patterns = make_cue_patterns(spec, rng)
    samples = []
    lo = 128 - spec.noise_level
    hi = 128 + spec.noise_level + 1
    max_slot = (spec.canvas - spec.cue_size) // spec.cue_align
    for i in range(spec.num_samples):
        label = i % spec.num_classes
        img = rng.integers(lo, hi, size=(3, spec.canvas, spec.canvas)).astype(np.uint8)
        top = spec.cue_align * int(rng.integers(0, max_slot + 1))
        left = spec.cue_align * int(rng.integers(0, max_slot + 1))
        img[:, top : top + spec.cue_size, left : left + spec.cue_size] = patterns[label]
        samples.append(Sample(id=f"synth-{i:05d}", image=img, label=label))
    return samples, patterns


def template_match_classify(image, patterns):
    """Nearest-cue oracle: best SSD match of any class template at any position."""
    img = np.asarray(image, dtype=np.float32)[0]  # cues are channel-identical
    size = patterns[0].shape[0]
    if img.shape[0] < size or img.shape[1] < size:
        return 0
    windows = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    best_class, best_ssd = 0, np.inf
    for cls, pattern in enumerate(patterns):
        diff = windows - pattern.astype(np.float32)
        ssd = np.min(np.sum(diff * diff, axis=(-1, -2)))
        if ssd < best_ssd:
            best_ssd, best_class = ssd, cls
    return best_class


# -- splits, folder layout, manifests ---------------------------------------


def random_partition(samples, fractions, seed):
    """Shuffle and split into train/val/test by the given fractions."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


def dataset_digest(splits: DatasetSplits):
    """Digest of every split's ids, labels, and pixel bytes plus class names."""
    digest = hashlib.sha256()
    digest.update(",".join(splits.class_names).encode("utf-8"))
    for name in ("train", "val", "test"):
        for sample in splits.split(name):
            digest.update(name.encode("utf-8"))
            digest.update(sample.id.encode("utf-8"))
            digest.update(str(sample.label).encode("utf-8"))
            digest.update(np.ascontiguousarray(sample.image).tobytes())
    return digest.hexdigest()[:16]


def build_dataset(data_cfg: DataConfig, seed_offset=0):
    """Materialize splits per the data config (synthetic or folder layout)."""
    if data_cfg.kind == "synthetic":
        samples, _ = synth_generate(data_cfg.synth)
        train, val, test = random_partition(
            samples, data_cfg.split_fractions, data_cfg.synth.seed + 1 + seed_offset
        )
        class_names = [f"class_{i}" for i in range(data_cfg.synth.num_classes)]
        splits = DatasetSplits(train=train, val=val, test=test, class_names=class_names)
    else:
        splits = load_folder_dataset(data_cfg.root)
    splits.normalization = compute_normalization(splits.train)
    splits.digest = dataset_digest(splits)
    return splits


def write_folder_dataset(root, splits: DatasetSplits):
    """Write `<root>/<split>/<class_name>/<id>.png` plus a split manifest."""
    manifest = {}
    for split_name in ("train", "val", "test"):
        ids = []
        for sample in splits.split(split_name):
            class_dir = os.path.join(root, split_name, splits.class_names[sample.label])
            os.makedirs(class_dir, exist_ok=True)
            arr = np.transpose(sample.image, (1, 2, 0))
            Image.fromarray(arr).save(os.path.join(class_dir, f"{sample.id}.png"))
            ids.append(sample.id)
        manifest[split_name] = sorted(ids)
    manifest["classes"] = list(splits.class_names)
    with open(os.path.join(root, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_folder_dataset(root):
    """Read the layout written by write_folder_dataset."""
    manifest_path = os.path.join(root, "splits.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no split manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    class_names = manifest["classes"]
    label_of = {name: i for i, name in enumerate(class_names)}
    out = {}
    for split_name in ("train", "val", "test"):
        wanted = set(manifest[split_name])
        found = []
        split_dir = os.path.join(root, split_name)
        for class_name in sorted(os.listdir(split_dir)) if os.path.isdir(split_dir) else []:
            class_dir = os.path.join(split_dir, class_name)
            for fname in sorted(os.listdir(class_dir)):
                sample_id = os.path.splitext(fname)[0]
                if sample_id not in wanted:
                    continue
                arr = np.asarray(Image.open(os.path.join(class_dir, fname)).convert("RGB"))
                image = np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))
                found.append(Sample(id=sample_id, image=image, label=label_of[class_name]))
        found.sort(key=lambda s: s.id)
        out[split_name] = found
    return DatasetSplits(
        train=out["train"], val=out["val"], test=out["test"], class_names=class_names
    )
