import csv
import json
import time

import numpy as np
import pytest
from PIL import Image

from diffsr.cli import main, read_loss_csv
from diffsr.field import read_field
from diffsr.synthdata import read_manifest

TINY = """
seed = 3
[data]
n_scenes = 4
rows = 32
cols = 32
val_scenes = 1
[patch]
size = 16
stride = 16
gamma = 1
[transform]
embed_patch = 8
embed_dim = 16
depth = 1
heads = 2
steps = 3
batch_size = 2
[denoiser]
base_channels = 8
depth = 2
time_dim = 16
steps = 3
batch_size = 2
[schedule]
T = 4
beta_min = 0.01
beta_max = 0.2
[sample]
stride = 16
seeds = [0]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run(cfg, out, *args):
    return main([*args, "--config", str(cfg), "--out", str(out)])


@pytest.fixture
def trained(tmp_path, tiny):
    out = tmp_path / "run"
    assert run(tiny, out, "gen-data") == 0
    assert run(tiny, out, "train", "tm") == 0
    assert run(tiny, out, "train", "diff", "--mode", "both") == 0
    return out


def test_gen_data_is_deterministic(tmp_path, tiny):
    assert run(tiny, tmp_path / "a", "gen-data") == 0
    assert run(tiny, tmp_path / "b", "gen-data") == 0
    ma, mb = (tmp_path / d / "data" / "manifest.json" for d in "ab")
    assert len(read_manifest(ma)) == 4
    assert ma.read_bytes() == mb.read_bytes()
    for e in read_manifest(ma):
        assert e["radar"].read_bytes() == (tmp_path / "b" / "data" / e["radar"].name).read_bytes()
    assert (tmp_path / "a" / "data" / "config.resolved.toml").exists()
    assert not (tmp_path / "a" / ".lock").exists()


def test_bad_output_path(tmp_path, tiny, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(tiny, blocker / "run", "gen-data") != 0
    assert "error" in capsys.readouterr().err
    assert not list(tmp_path.rglob("manifest.json"))


def test_locked_run_directory(tmp_path, tiny):
    out = tmp_path / "run"
    out.mkdir()
    (out / ".lock").write_text("1")
    assert run(tiny, out, "gen-data") != 0


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[data]\nscenes = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "r")]) != 0


def test_diff_without_tm_bundle(tmp_path, tiny, capsys):
    out = tmp_path / "run"
    assert run(tiny, out, "gen-data") == 0
    assert run(tiny, out, "train", "diff", "--mode", "both") != 0
    assert "stage-1 bundle" in capsys.readouterr().err
    assert run(tiny, out, "train", "diff", "--mode", "satellite") == 0


def test_train_logs_and_reruns(trained, tiny, tmp_path):
    for stage in ("tm", "diff-both"):
        d = trained / stage
        assert (d / "bundle.dsrb").exists() and (d / "config.resolved.toml").exists()
        assert len(read_loss_csv(d / "loss.csv")) == 3
        assert (d / "timing.csv").exists()
    logged = json.loads((trained / "diff-both" / "denoiser.json").read_text())
    assert logged["condition_channels"] == 5
    first = (trained / "tm" / "loss.csv").read_bytes()
    assert run(tiny, trained, "train", "tm") == 0
    assert (trained / "tm" / "loss.csv").read_bytes() == first


def test_sample_outputs(trained, tiny):
    assert run(tiny, trained, "sample", "--mode", "both") == 0
    out = trained / "samples-both" / "seed0"
    entries = read_manifest(out / "manifest.json")
    assert [e["id"] for e in entries] == ["scene000006"]
    f = read_field(entries[0]["radar"])
    assert f.values.shape == (32, 32)
    assert 0 <= f.values.min() and f.values.max() <= 60
    with Image.open(out / "scene000006_pred.png") as im:
        assert im.size == (32, 32) and im.mode == "RGB"
    first = entries[0]["radar"].read_bytes()
    assert run(tiny, trained, "sample", "--mode", "both") == 0
    assert entries[0]["radar"].read_bytes() == first
    assert (out / "estimate" / "manifest.json").exists()


def test_sample_named_scenes(trained, tiny):
    assert run(tiny, trained, "sample", "--scenes", "scene000003,scene000004") == 0
    ids = [e["id"] for e in read_manifest(trained / "samples-both" / "seed0" / "manifest.json")]
    assert ids == ["scene000003", "scene000004"]
    assert run(tiny, trained, "sample", "--scenes", "nope") != 0


def _metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_evaluate_identity_and_mean(trained, tiny, capsys):
    truth = trained / "data" / "manifest.json"
    assert run(tiny, trained, "evaluate", "--pred", str(truth), "--model-id", "truth") == 0
    assert "LPIPS: n/a" in capsys.readouterr().out
    rows = _metrics(trained / "metrics.csv")
    assert len(rows) == 5 and rows[-1]["scene_id"] == "MEAN"
    assert float(rows[-1]["rmse"]) == 0.0 and float(rows[-1]["ssim"]) == pytest.approx(1.0, abs=1e-9)
    assert len(rows[0]) == 2 + 11

    assert run(tiny, trained, "sample") == 0
    pred = trained / "samples-both" / "seed0" / "manifest.json"
    assert run(tiny, trained, "evaluate", "--pred", str(pred)) == 0
    rows = _metrics(trained / "metrics.csv")
    for col in rows[0]:
        if col not in ("scene_id", "model_id"):
            assert float(rows[-1][col]) == np.mean([float(r[col]) for r in rows[:-1]])


def test_evaluate_missing_scene(trained, tiny, tmp_path, capsys):
    data = json.loads((trained / "data" / "manifest.json").read_text())
    data["scenes"] = data["scenes"][:2]
    truth = trained / "data" / "partial.json"
    truth.write_text(json.dumps(data))
    assert run(tiny, trained, "evaluate", "--pred", str(trained / "data" / "manifest.json"),
               "--truth", str(truth)) != 0
    err = capsys.readouterr().err
    assert "scene000005" in err and "scene000006" in err


# 200 TM steps on the TINY config measured at ~1.9 s CPU (3.9 s cold) on one core
TM_BUDGET_CPU_S = 10.0


def test_train_tm_within_budget(tmp_path):
    cfg = tmp_path / "budget.toml"
    cfg.write_text(TINY.replace("steps = 3\nbatch_size = 2\n[denoiser]", "steps = 200\nbatch_size = 2\n[denoiser]"))
    out = tmp_path / "run"
    assert run(cfg, out, "gen-data") == 0
    t0 = time.process_time()
    assert run(cfg, out, "train", "tm") == 0
    assert time.process_time() - t0 < TM_BUDGET_CPU_S
    assert len(read_loss_csv(out / "tm" / "loss.csv")) == 200


def test_patchify_writes_manifest(tmp_path, tiny):
    out = tmp_path / "run"
    assert run(tiny, out, "gen-data") == 0
    assert run(tiny, out, "patchify") == 0
    entries = json.loads((out / "patches" / "manifest.json").read_text())["scenes"]
    assert entries and all(e["id"].startswith("scene") for e in entries)


def test_ablate(trained, tiny):
    assert run(tiny, trained, "ablate") == 0
    abl = trained / "ablation"
    rows = _metrics(abl / "table.csv")
    assert [r["model"] for r in rows] == ["Diff-baseline1", "Diff-baseline2", "DiffSR"]
    assert list(rows[0]) == ["model", "satellite", "radar_estimate", "ssim", "rmse", "csi_35_pool8", "csi_50_pool8"]
    assert all(np.isfinite(float(r[c])) for r in rows for c in ("ssim", "rmse", "csi_35_pool8", "csi_50_pool8"))
    logged = json.loads((abl / "diff-estimate" / "denoiser.json").read_text())
    assert logged["condition_channels"] == 1 and logged["mode"] == "estimate"
    assert (abl / "csi.png").exists() and (abl / "table.md").exists()


def test_ablate_requires_inputs(tmp_path, tiny):
    assert run(tiny, tmp_path / "empty", "ablate") != 0
