"""Training orchestration: cached frozen features in, updated side network out.

One run is fully determined by (seed, config, cache bytes): batch order comes
from the run seed, augmentation rngs are derived per (augment seed, run seed,
epoch, step), and all reductions happen in numpy's fixed order. The backbone is
never touched; freeze_check proves it bitwise after the fact.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .cache import compute_sample_features
from .config import FptConfig
from .data import augment_low, normalize, resize_bilinear
from .fusion import FptModel, build_model, mode_settings
from .metrics import activation_breakdown, count_params
from .numerics import AdamW, cross_entropy, softmax


class UndefinedAUCError(RuntimeError):
    """AUC is undefined: the split has no class with both positives and negatives."""


class NanLossError(RuntimeError):
    """Training produced a non-finite loss."""


# -- AUC --------------------------------------------------------------------


def _midranks(values):
    """Ranks 1..n with ties averaged (midrank convention)."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positives):
    """Mann-Whitney AUC of scores for a boolean positive mask, midrank ties."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int(len(positives) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("need both positive and negative samples")
    ranks = _midranks(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores, labels):
    """Macro one-vs-rest AUC over classes present with both positives and negatives.

    scores: (N, C) class scores; labels: (N,) integer labels. Raises
    UndefinedAUCError when no class qualifies (e.g. a single-class split).
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match labels {labels.shape}")
    per_class = []
    for cls in range(scores.shape[1]):
        positives = labels == cls
        if 0 < positives.sum() < len(labels):
            per_class.append(binary_auc(scores[:, cls], positives))
    if not per_class:
        raise UndefinedAUCError("no class has both positive and negative samples")
    return float(np.mean(per_class))


# -- feature sources ---------------------------------------------------------


class CachedFeatures:
    """Serves per-layer fusion features from a verified FeatureCache."""

    def __init__(self, cache):
        self.cache = cache

    def features_for(self, samples):
        return self.cache.features_for([s.id for s in samples])


class LiveFeatures:
    """Recomputes frozen features on the fly; bit-equal to the cached path."""

    def __init__(self, cfg, backbone, norm, ratio):
        self.cfg = cfg
        self.backbone = backbone
        self.norm = norm
        self.ratio = ratio

    def features_for(self, samples):
        return compute_sample_features(
            samples, self.cfg, self.backbone, self.norm, ratio=self.ratio
        )


# -- reports ------------------------------------------------------------------


@dataclass
class TrainReport:
    mode: str
    seed: int
    config_digest: str
    epoch_losses: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    test_auc: float = float("nan")
    learnable_params: int = 0
    total_params: int = 0
    activation_elements: int = 0

    def to_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "epoch_losses": self.epoch_losses,
            "val_auc": self.val_auc,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "test_auc": self.test_auc,
            "learnable_params": self.learnable_params,
            "total_params": self.total_params,
            "activation_elements": self.activation_elements,
        }


@dataclass
class FreezeReport:
    passed: bool
    failures: list


# -- the loop -----------------------------------------------------------------


def _side_inputs(samples, cfg, mode, norm, rng=None):
    """Stack normalized side-network inputs; augmented when an rng is given."""
    side_res, _, _ = mode_settings(cfg, mode)
    images = []
    for sample in samples:
        if rng is None:
            img = resize_bilinear(sample.image, side_res)
        else:
            img = augment_low(sample.image, rng, side_res)
        images.append(normalize(img, norm))
    return np.stack(images, axis=0)


def _scores(model, samples, cfg, mode, norm, feature_source, batch_size=32):
    out = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        x = _side_inputs(batch, cfg, mode, norm)
        features = feature_source.features_for(batch) if feature_source else None
        logits = model.side.forward(x, features)
        out.append(softmax(logits, axis=-1).data)
    return np.concatenate(out, axis=0)


def evaluate(model, samples, cfg, mode, norm, feature_source):
    """Macro one-vs-rest AUC over a split; no augmentation, no mutation."""
    probs = _scores(model, samples, cfg, mode, norm, feature_source)
    labels = np.array([s.label for s in samples])
    return macro_auc(probs, labels)


def _augment_rng(cfg, epoch, step):
    seq = np.random.SeedSequence([cfg.data.augment_seed, cfg.train.seed, epoch, step])
    return np.random.default_rng(seq)


def train(cfg: FptConfig, splits, feature_source, model=None, mode=None):
    """Run the configured training and return (TrainReport, model at best epoch).

    feature_source is a CachedFeatures or LiveFeatures (None for side_only).
    The caller is responsible for cache verification before handing it in.
    """
    mode = mode or cfg.train.mode
    run = cfg.train
    if model is None:
        model = build_model(cfg, mode)
    norm = splits.normalization

    learnable = model.learnable_tensors()
    optimizer = AdamW(
        [p for _, p in learnable], lr=run.lr, weight_decay=run.weight_decay,
    )
    report = TrainReport(mode=mode, seed=run.seed, config_digest=cfg.digest())
    report.learnable_params = count_params(model, learnable_only=True)
    report.total_params = count_params(model)
    report.activation_elements = activation_breakdown(cfg, mode)["total"]

    rng = np.random.default_rng(run.seed)
    best_state = {name: p.data.copy() for name, p in learnable}
    dropout_active = cfg.side.dropout > 0.0

    for epoch in range(run.epochs):
        order = rng.permutation(len(splits.train))
        losses = []
        for step, start in enumerate(range(0, len(order), run.batch_size)):
            batch = [splits.train[i] for i in order[start : start + run.batch_size]]
            aug_rng = _augment_rng(cfg, epoch, step)
            x = _side_inputs(batch, cfg, mode, norm, rng=aug_rng)
            features = feature_source.features_for(batch) if feature_source else None
            drop_rng = _augment_rng(cfg, epoch, step + 1_000_003) if dropout_active else None
            logits = model.side.forward(x, features, rng=drop_rng)
            labels = np.array([s.label for s in batch])
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NanLossError(
                    f"non-finite loss at epoch {epoch} step {step} (lr={run.lr})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(value)
        report.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))

        auc = evaluate(model, splits.val, cfg, mode, norm, feature_source)
        report.val_auc.append(auc)
        if report.best_epoch < 0 or auc > report.best_val_auc:
            report.best_epoch = epoch
            report.best_val_auc = auc
            best_state = {name: p.data.copy() for name, p in learnable}

    for name, p in learnable:
        p.data = best_state[name]
    if splits.test:
        try:
            report.test_auc = evaluate(model, splits.test, cfg, mode, norm, feature_source)
        except UndefinedAUCError:
            report.test_auc = float("nan")
    return report, model


def freeze_check(model: FptModel):
    """Verify the backbone is untouched: frozen flags, no grads, bitwise values."""
    failures = []
    for name, p in model.frozen_tensors():
        if p.requires_grad:
            failures.append(f"{name}: requires_grad is True")
        if p.grad is not None:
            failures.append(f"{name}: has a gradient buffer")
        digest = hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
        if digest != model._frozen_digests.get(name):
            failures.append(f"{name}: value changed since initialization")
    return FreezeReport(passed=not failures, failures=failures)
