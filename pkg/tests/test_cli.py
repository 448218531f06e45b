import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from lff.cli import main
from lff.config import ExperimentConfig, apply_override, resolve
from lff.data import read_tensor
from lff.errors import ConfigError

TINY = {
    "model": {"dim": 8, "blocks": 1, "heads": 2, "height": 8, "width": 8, "freq_dim": 8, "adapter_blocks": 1,
              "text_tokens": 2, "context_k": 1},
    "data": {"scenes": 1, "frames": 12},
    "train": {"steps": 3, "window": 4, "val_samples": 2, "val_every": 2},
    "window": {"total": 12, "length": 6, "overlap": 2},
    "sampler": {"steps": 2},
    "ablation": {"variants": ["full", "adapter_off"], "guidance": ["native", "cfg", "off"], "seeds": [0]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _train(cfg_path, out, *extra):
    assert main(["train", "--config", str(cfg_path), "--out", str(out), *extra]) == 0


def test_train_writes_checkpoint_metrics_and_run_json(cfg_path, tmp_path):
    out = tmp_path / "run"
    _train(cfg_path, out)
    assert (out / "checkpoint" / "manifest.json").exists()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert list(rows[0]) == ["step", "loss", "branch", "q", "t"]
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["train"]["steps"] == 3
    assert run["config"]["train"]["p_drop"] == 0.1  # defaults materialised
    assert ExperimentConfig.from_dict(run["config"]).validate() == []


def test_same_seed_same_losses(cfg_path, tmp_path):
    _train(cfg_path, tmp_path / "a")
    _train(cfg_path, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    _train(cfg_path, tmp_path / "c", "--seed", "7")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_lr_zero_keeps_checkpoint_bytes(cfg_path, tmp_path):
    out = tmp_path / "run"
    _train(cfg_path, out, "--lr", "0")
    init, final = out / "checkpoint_init", out / "checkpoint"
    files = sorted(p.name for p in init.glob("*.tnsr"))
    assert files and files == sorted(p.name for p in final.glob("*.tnsr"))
    for name in files:
        assert (init / name).read_bytes() == (final / name).read_bytes()


def test_gen_data_then_train_from_disk(cfg_path, tmp_path):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    doc = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert {e["split"] for e in doc["scenes"]} == {"train", "val"}
    _train(cfg_path, tmp_path / "disk", "--data", str(tmp_path / "data"))
    _train(cfg_path, tmp_path / "mem")
    # same seed, same scenes: loading from disk changes nothing
    assert (tmp_path / "disk" / "metrics.csv").read_bytes() == (tmp_path / "mem" / "metrics.csv").read_bytes()


def test_sample_and_metrics(cfg_path, tmp_path):
    _train(cfg_path, tmp_path / "t")
    out = tmp_path / "s"
    assert main(["sample", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "t" / "checkpoint"),
                 "--out", str(out)]) == 0
    assert read_tensor(out / "latents.tnsr").shape == (12, 3, 8, 8)
    assert len(list((out / "frames").glob("*.ppm"))) == 12
    first = (out / "drift.csv").read_text()
    assert first.splitlines()[0] == "clip,mean_shift,std_shift,ciede,sync_r"
    assert main(["metrics", "--config", str(cfg_path), "--run", str(out), "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "drift.csv").read_text() == first


def test_sample_single_window(cfg_path, tmp_path):
    _train(cfg_path, tmp_path / "t")
    out = tmp_path / "s"
    assert main(["sample", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "t" / "checkpoint"),
                 "--out", str(out), "--window", "16", "--overlap", "2", "--no-frames"]) == 0
    assert read_tensor(out / "latents.tnsr").shape[0] == 12


@pytest.mark.parametrize("strategy", ["plain_window", "motion_frame"])
def test_sample_baselines(cfg_path, tmp_path, strategy):
    _train(cfg_path, tmp_path / "t")
    assert main(["sample", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "t" / "checkpoint"),
                 "--out", str(tmp_path / "s"), "--strategy", strategy, "--guidance", "off", "--no-frames"]) == 0


def test_ablate_grid(cfg_path, tmp_path):
    ck = tmp_path / "ck"
    for v in ("full", "adapter_off"):
        _train(cfg_path, tmp_path / v, "--variant", v)
        (tmp_path / v / "checkpoint").rename(ck / v) if ck.exists() else (ck.mkdir(), (tmp_path / v / "checkpoint").rename(ck / v))
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(cfg_path), "--checkpoints", str(ck), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 6
    assert {(r["variant"], r["guidance"]) for r in rows} == {(v, g) for v in ("full", "adapter_off")
                                                              for g in ("native", "cfg", "off")}
    w = list(csv.DictReader(open(out / "weighting.csv")))
    assert [r["scheme"] for r in w] == ["logarithmic", "fixed", "uniform"]
    out2 = tmp_path / "ab2"
    assert main(["ablate", "--config", str(cfg_path), "--checkpoints", str(ck), "--out", str(out2)]) == 0
    assert (out / "ablation.csv").read_bytes() == (out2 / "ablation.csv").read_bytes()


def test_ablate_missing_checkpoint_names_variant(cfg_path, tmp_path, capsys):
    ck = tmp_path / "ck"
    _train(cfg_path, tmp_path / "f")
    ck.mkdir()
    (tmp_path / "f" / "checkpoint").rename(ck / "full")
    code = main(["ablate", "--config", str(cfg_path), "--checkpoints", str(ck), "--out", str(tmp_path / "ab")])
    assert code == 1
    assert "adapter_off" in capsys.readouterr().err


def test_invalid_config_exit_2(cfg_path, tmp_path, capsys):
    code = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x"),
                 "--set", "window.overlap=1", "--set", "train.lr=-2"])
    assert code == 2
    err = capsys.readouterr().err
    assert "window.overlap" in err and "train.lr" in err
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x"), "--set", "model.nope=1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv("LFF_SEED", "42")
    assert resolve().seed == 42
    monkeypatch.setenv("LFF_SEED", "x")
    with pytest.raises(ConfigError):
        resolve()


def test_override_parsing():
    cfg = ExperimentConfig()
    apply_override(cfg, "window.skip_fusion_at_T=false")
    apply_override(cfg, "model.audio_radius=null")
    apply_override(cfg, "ablation.seeds=[1, 2, 3]")
    assert cfg.window.skip_fusion_at_T is False and cfg.model.audio_radius is None and cfg.ablation.seeds == [1, 2, 3]
    with pytest.raises(ConfigError):
        apply_override(cfg, "train.steps=many")
    with pytest.raises(ConfigError):
        apply_override(cfg, "nosuch.field=1")


def test_selftest_command():
    assert main(["selftest"]) == 0
