"""Command-line entry point: cache, train, eval, report, sweep, selftest.

Exit codes are fixed for scripting:
    0  success
    2  config error (bad file, bad field, undefined metric)
    3  I/O error
    4  stale or already-existing cache
    5  training aborted on a non-finite loss
"""

import argparse
import itertools
import json
import os
import sys

import numpy as np

from .cache import CacheIOError, FeatureCache, StaleCacheError, build_cache
from .config import ConfigError, FptConfig
from .data import build_dataset
from .fusion import build_model, load_checkpoint, save_checkpoint
from .metrics import (
    activation_breakdown,
    param_counts,
    pme,
    ppe,
    render_table,
)
from .trainer import (
    CachedFeatures,
    NanLossError,
    UndefinedAUCError,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CACHE = 4
EXIT_NAN = 5

SPLITS = ("train", "val", "test")


def _load_config(args):
    cfg = FptConfig.load(args.config)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not value:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key] = value
    for shortcut in ("mode", "epochs", "lr", "seed"):
        value = getattr(args, shortcut, None)
        if value is not None:
            overrides[f"train.{shortcut}"] = value
    for key, value in overrides.items():
        _apply_override(cfg, key, value)
    cfg.validate()
    return cfg


def _apply_override(cfg, dotted, value):
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config path {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config path {dotted!r}")
    current = getattr(target, leaf)
    if isinstance(current, bool):
        value = str(value).lower() in ("1", "true", "yes")
    elif current is not None:
        value = type(current)(value)
    setattr(target, leaf, value)


def _cache_dir(args):
    return args.cache_dir or os.environ.get("FPT_CACHE_DIR") or "cache"


def _cache_path(cache_dir, split):
    return os.path.join(cache_dir, f"{split}.fptc")


def _open_verified_cache(cfg, splits, cache_dir, split):
    from .backbone import FrozenBackbone

    path = _cache_path(cache_dir, split)
    if not os.path.isfile(path):
        raise StaleCacheError(f"no cache for split {split!r} at {path}; run the cache command")
    backbone_identity = FrozenBackbone(cfg.backbone).identity
    return FeatureCache(path).verify(cfg, backbone_identity, splits.digest)


def cmd_cache(args):
    cfg = _load_config(args)
    cache_dir = _cache_dir(args)
    if args.data_root:
        cfg.data.kind = "folder"
        cfg.data.root = args.data_root
    splits = build_dataset(cfg.data)
    os.makedirs(cache_dir, exist_ok=True)
    existing = [s for s in SPLITS if os.path.exists(_cache_path(cache_dir, s))]
    if existing and not args.force:
        print(f"cache files already exist for {existing}; pass --force to rebuild", file=sys.stderr)
        return EXIT_CACHE
    model = build_model(cfg, "fpt")
    total_bytes = 0
    for split in SPLITS:
        samples = splits.split(split)
        path = _cache_path(cache_dir, split)
        manifest = build_cache(
            samples, cfg, model.backbone, splits.normalization, path,
            dataset_digest=splits.digest,
        )
        size = os.path.getsize(path)
        total_bytes += size
        print(f"{split}: {manifest['sample_count']} samples, {size:,} bytes -> {path}")
        if manifest["skipped"]:
            print(f"{split}: skipped {len(manifest['skipped'])} unreadable samples")
    print(f"total {total_bytes:,} bytes (config hash {manifest['config_hash']})")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    splits = build_dataset(cfg.data)
    mode = cfg.train.mode
    feature_source = None
    if mode != "side_only":
        cache = _open_verified_cache(cfg, splits, _cache_dir(args), "train")
        val_cache = _open_verified_cache(cfg, splits, _cache_dir(args), "val")
        test_cache = _open_verified_cache(cfg, splits, _cache_dir(args), "test")
        feature_source = _SplitFeatures(cache, val_cache, test_cache)
    report, model = train(cfg, splits, feature_source)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.fpts")
    save_checkpoint(ckpt_path, model, cfg)
    report_path = os.path.join(args.out_dir, "train_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    print(f"best val AUC {report.best_val_auc:.4f} at epoch {report.best_epoch}")
    print(f"test AUC {report.test_auc:.4f}")
    print(f"checkpoint -> {ckpt_path}")
    print(f"report -> {report_path}")
    return EXIT_OK


class _SplitFeatures:
    """Routes feature lookups to whichever split cache holds the sample."""

    def __init__(self, *caches):
        self.caches = caches
        self.owner = {}
        for cache in caches:
            for rec in cache.manifest["samples"]:
                self.owner[rec["id"]] = cache

    def features_for(self, samples):
        cache = self.owner[samples[0].id]
        return CachedFeatures(cache).features_for(samples)


def cmd_eval(args):
    if args.checkpoint:
        model, cfg = load_checkpoint(args.checkpoint)
    elif args.config:
        cfg = _load_config(args)
        model = build_model(cfg, cfg.train.mode)
    else:
        raise ConfigError("eval needs --checkpoint or --config")
    splits = build_dataset(cfg.data)
    samples = splits.split(args.split)
    feature_source = None
    if cfg.train.mode != "side_only":
        cache = _open_verified_cache(cfg, splits, _cache_dir(args), args.split)
        feature_source = CachedFeatures(cache)
    auc = evaluate(model, samples, cfg, cfg.train.mode, splits.normalization, feature_source)
    print(f"{args.split} AUC: {auc:.4f}")
    return EXIT_OK


def cmd_report(args):
    if args.fixtures:
        with open(args.fixtures, "r", encoding="utf-8") as fh:
            fixture = json.load(fh)
        baseline_mem = float(fixture["baseline_mem"])
        rows = []
        score_columns = fixture.get("score_columns", [])
        for entry in fixture["rows"]:
            scores = entry.get("scores", {})
            avg = entry.get("avg_auc", np.mean(list(scores.values())) if scores else 0.0)
            r = entry["params_pct"] / 100.0
            m_mem = entry["mem_mb"] / baseline_mem
            rows.append({
                "name": entry["name"],
                "params_pct": entry["params_pct"],
                "mem": entry["mem_mb"],
                "scores": scores,
                "avg": avg,
                "ppe": ppe(avg, r),
                "pme": pme(avg, m_mem),
            })
        print(render_table(rows, score_columns))
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump({"rows": rows}, fh, indent=2, sort_keys=True)
        return EXIT_OK

    if not args.config:
        raise ConfigError("report needs --fixtures or --config")
    cfg = _load_config(args)
    counts = param_counts(cfg, "fpt")
    ratio = counts["learnable"] / counts["total"]
    fpt_mem = activation_breakdown(cfg, "fpt")["total"]
    full_mem = activation_breakdown(cfg, "full_finetune")["total"]
    mem_ratio = fpt_mem / full_mem
    print(f"config digest        {cfg.digest()}")
    print(f"learnable params     {counts['learnable']:,}")
    print(f"total params         {counts['total']:,}")
    print(f"learnable ratio      {100 * ratio:.2f}%")
    print(f"retained activations {fpt_mem:,} elements (full fine-tune: {full_mem:,})")
    print(f"memory ratio         {mem_ratio:.4f}")
    print(f"PPE at score 100     {ppe(100.0, ratio):.2f}")
    print(f"PME at score 100     {pme(100.0, mem_ratio):.2f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg_base = _load_config(args)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = json.load(fh)
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    os.makedirs(args.out_dir, exist_ok=True)
    summary = []
    for i, combo in enumerate(combos):
        cfg = FptConfig.from_dict(cfg_base.to_dict())
        for key, value in zip(keys, combo):
            _apply_override(cfg, key, value)
        cfg.validate()
        splits = build_dataset(cfg.data)
        feature_source = None
        if cfg.train.mode != "side_only":
            cache_dir = _cache_dir(args)
            feature_source = _SplitFeatures(
                *(_open_verified_cache(cfg, splits, cache_dir, s) for s in SPLITS)
            )
        report, model = train(cfg, splits, feature_source)
        run_dir = os.path.join(args.out_dir, f"run_{i:03d}")
        os.makedirs(run_dir, exist_ok=True)
        save_checkpoint(os.path.join(run_dir, "checkpoint.fpts"), model, cfg)
        with open(os.path.join(run_dir, "train_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        settings = dict(zip(keys, combo))
        summary.append({"run": i, "settings": settings,
                        "best_val_auc": report.best_val_auc, "test_auc": report.test_auc})
        print(f"run {i:03d} {settings} -> val {report.best_val_auc:.4f} test {report.test_auc:.4f}")
    with open(os.path.join(args.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(verbose=True) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="fpt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. train.lr=0.01")
        p.add_argument("--mode", help="training mode override")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--cache-dir", help="cache directory (default: $FPT_CACHE_DIR or ./cache)")

    p = sub.add_parser("cache", help="precompute and store frozen features")
    add_common(p)
    p.add_argument("--data-root", help="folder dataset root (overrides config)")
    p.add_argument("--force", action="store_true", help="overwrite an existing cache")
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("train", help="train the configured mode")
    add_common(p)
    p.add_argument("--out-dir", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh model)")
    add_common(p, config_required=False)
    p.add_argument("--checkpoint", help="FPTS checkpoint path")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="efficiency table from fixtures or a config")
    add_common(p, config_required=False)
    p.add_argument("--fixtures", help="JSON fixture of published (score, params, mem) rows")
    p.add_argument("--out", help="also write the table as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="grid-search over config overrides")
    add_common(p)
    p.add_argument("--grid", required=True, help="JSON mapping of config path -> value list")
    p.add_argument("--out-dir", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in invariant battery")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedAUCError as exc:
        print(f"undefined AUC: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StaleCacheError as exc:
        print(f"stale cache: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except NanLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except CacheIOError as exc:
        print(f"cache I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
