"""CLI flows and exit codes: cache build/immutability, train + eval, report
fixtures reproducing the published PPE/PME, and failure mapping."""

import json
import os

import numpy as np
import pytest

from fpt.cli import EXIT_CACHE, EXIT_CONFIG, EXIT_OK, main
from fpt.config import FptConfig


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = FptConfig()
    cfg.backbone.image_size_high = 32
    cfg.backbone.patch_size = 8
    cfg.backbone.dim = 16
    cfg.backbone.layers = 2
    cfg.backbone.heads = 2
    cfg.backbone.pretrain_grid = 4
    cfg.side.image_size_low = 16
    cfg.side.num_prompts = 2
    cfg.data.synth.canvas = 32
    cfg.data.synth.num_samples = 24
    cfg.train.epochs = 1
    cfg.train.batch_size = 8
    cfg.validate()
    path = str(tmp_path / "config.json")
    cfg.save(path)
    return path


def test_cache_then_train_then_eval(tiny_config, tmp_path, capsys):
    cache_dir = str(tmp_path / "cache")
    out_dir = str(tmp_path / "run")

    assert main(["cache", "--config", tiny_config, "--cache-dir", cache_dir]) == EXIT_OK
    out = capsys.readouterr().out
    assert "train:" in out and "bytes" in out
    manifest = json.load(open(os.path.join(cache_dir, "train.fptc.manifest.json")))
    assert manifest["sample_count"] > 0

    assert main(["train", "--config", tiny_config, "--cache-dir", cache_dir,
                 "--out-dir", out_dir]) == EXIT_OK
    assert os.path.exists(os.path.join(out_dir, "checkpoint.fpts"))
    report = json.load(open(os.path.join(out_dir, "train_report.json")))
    assert report["config_digest"]
    assert len(report["epoch_losses"]) == 1

    assert main(["eval", "--checkpoint", os.path.join(out_dir, "checkpoint.fpts"),
                 "--cache-dir", cache_dir, "--split", "test"]) == EXIT_OK
    assert "AUC" in capsys.readouterr().out


def test_cache_rerun_without_force_fails(tiny_config, tmp_path):
    cache_dir = str(tmp_path / "cache")
    assert main(["cache", "--config", tiny_config, "--cache-dir", cache_dir]) == EXIT_OK
    assert main(["cache", "--config", tiny_config, "--cache-dir", cache_dir]) == EXIT_CACHE
    assert main(["cache", "--config", tiny_config, "--cache-dir", cache_dir,
                 "--force"]) == EXIT_OK


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"mode": "nope"}}), encoding="utf-8")
    assert main(["cache", "--config", str(bad), "--cache-dir", str(tmp_path / "c")]) == EXIT_CONFIG
    assert not os.path.exists(tmp_path / "c" / "train.fptc")


def test_stale_cache_exits_4(tiny_config, tmp_path):
    cache_dir = str(tmp_path / "cache")
    assert main(["cache", "--config", tiny_config, "--cache-dir", cache_dir]) == EXIT_OK
    # change the selection ratio: hash moves, cache is stale
    assert main(["train", "--config", tiny_config, "--cache-dir", cache_dir,
                 "--set", "selection.ratio=0.5",
                 "--out-dir", str(tmp_path / "run")]) == EXIT_CACHE


def test_missing_cache_exits_4(tiny_config, tmp_path):
    assert main(["train", "--config", tiny_config, "--cache-dir", str(tmp_path / "none"),
                 "--out-dir", str(tmp_path / "run")]) == EXIT_CACHE


def test_side_only_trains_without_cache(tiny_config, tmp_path):
    assert main(["train", "--config", tiny_config, "--mode", "side_only",
                 "--out-dir", str(tmp_path / "run")]) == EXIT_OK


def test_train_lr_zero_equals_untrained_eval(tiny_config, tmp_path, capsys):
    cache_dir = str(tmp_path / "cache")
    out_dir = str(tmp_path / "run")
    main(["cache", "--config", tiny_config, "--cache-dir", cache_dir])
    capsys.readouterr()

    assert main(["train", "--config", tiny_config, "--cache-dir", cache_dir,
                 "--lr", "0", "--out-dir", out_dir]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--checkpoint", os.path.join(out_dir, "checkpoint.fpts"),
                 "--cache-dir", cache_dir]) == EXIT_OK
    trained = capsys.readouterr().out

    assert main(["eval", "--config", tiny_config, "--cache-dir", cache_dir]) == EXIT_OK
    fresh = capsys.readouterr().out
    assert trained.strip().split()[-1] == fresh.strip().split()[-1]


def test_eval_single_class_split_fails(tiny_config, tmp_path, capsys):
    # 4 test samples from 24 at 70/10/20 can hold multiple classes; shrink to
    # force a single-class split instead: use a 5-sample dataset.
    cfg = FptConfig.load(tiny_config)
    cfg.data.synth.num_samples = 5
    path = str(tmp_path / "small.json")
    cfg.save(path)
    cache_dir = str(tmp_path / "cache2")
    assert main(["cache", "--config", path, "--cache-dir", cache_dir]) == EXIT_OK
    code = main(["eval", "--config", path, "--cache-dir", cache_dir, "--split", "test"])
    assert code == EXIT_CONFIG
    assert "undefined" in capsys.readouterr().err.lower()


def test_report_fixtures_reproduce_published_values(tmp_path, capsys):
    fixture = {
        "baseline_mem": 24116,
        "score_columns": [],
        "rows": [
            {"name": "full_fine_tuning", "params_pct": 100.0, "mem_mb": 24116, "avg_auc": 93.96},
            {"name": "linear_probing", "params_pct": 0.01, "mem_mb": 4364, "avg_auc": 88.30},
            {"name": "fpt", "params_pct": 1.81, "mem_mb": 3182, "avg_auc": 92.26},
        ],
    }
    fpath = tmp_path / "fixture.json"
    fpath.write_text(json.dumps(fixture), encoding="utf-8")
    out_json = tmp_path / "table.json"
    assert main(["report", "--fixtures", str(fpath), "--out", str(out_json)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "PPE" in table and "fpt" in table

    rows = {r["name"]: r for r in json.load(open(out_json))["rows"]}
    assert abs(rows["full_fine_tuning"]["ppe"] - 69.54) <= 0.02
    assert abs(rows["full_fine_tuning"]["pme"] - 69.54) <= 0.02
    assert abs(rows["linear_probing"]["ppe"] - 88.30) <= 0.02
    assert abs(rows["linear_probing"]["pme"] - 82.15) <= 0.02
    assert abs(rows["fpt"]["ppe"] - 91.54) <= 0.02
    assert abs(rows["fpt"]["pme"] - 87.42) <= 0.02


def test_report_from_config(tiny_config, capsys):
    assert main(["report", "--config", tiny_config]) == EXIT_OK
    out = capsys.readouterr().out
    assert "learnable ratio" in out
    assert "config digest" in out


def test_sweep_runs_grid(tiny_config, tmp_path, capsys):
    cache_dir = str(tmp_path / "cache")
    main(["cache", "--config", tiny_config, "--cache-dir", cache_dir])
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"train.lr": [0.0, 0.01]}), encoding="utf-8")
    out_dir = str(tmp_path / "sweep")
    assert main(["sweep", "--config", tiny_config, "--cache-dir", cache_dir,
                 "--grid", str(grid), "--out-dir", out_dir]) == EXIT_OK
    summary = json.load(open(os.path.join(out_dir, "summary.json")))
    assert len(summary) == 2
    assert os.path.exists(os.path.join(out_dir, "run_000", "train_report.json"))
    assert os.path.exists(os.path.join(out_dir, "run_001", "checkpoint.fpts"))


def test_selftest_command(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_env_var_cache_dir(tiny_config, tmp_path, monkeypatch):
    env_dir = str(tmp_path / "envcache")
    monkeypatch.setenv("FPT_CACHE_DIR", env_dir)
    assert main(["cache", "--config", tiny_config]) == EXIT_OK
    assert os.path.exists(os.path.join(env_dir, "train.fptc"))


def test_config_digest_embedded_in_outputs(tiny_config, tmp_path):
    cache_dir = str(tmp_path / "cache")
    out_dir = str(tmp_path / "run")
    main(["cache", "--config", tiny_config, "--cache-dir", cache_dir])
    main(["train", "--config", tiny_config, "--cache-dir", cache_dir, "--out-dir", out_dir])
    cfg = FptConfig.load(tiny_config)
    report = json.load(open(os.path.join(out_dir, "train_report.json")))
    assert report["config_digest"] == cfg.digest()
