import json

import pytest

from conftest import small_model
from segstitch import cli
from segstitch.gradcheck import GradCheckResult
from segstitch.volio import read_manifest, read_volume


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def small_cfg(tmp_path):
    model = small_model().to_dict()
    return write_json(tmp_path / "cfg.json", {"model": model, "train": {"lr": 0.05, "max_epochs": 2}})


def test_profile_prints_table(tmp_path, capsys):
    tiny = dict(in_channels=1, num_classes=2, input_shape=[32, 32, 32], stage_widths=[8, 16, 32, 64],
                heads=[1, 2, 2, 4], window=8, blocks_per_stage=1)
    assert cli.main(["profile", "--config", write_json(tmp_path / "tiny.json", tiny)]) == 0
    out = capsys.readouterr().out
    assert "total" in out and "207554" in out and "GFLOPs" in out


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["nonsense"]) == 1
    assert cli.main(["profile", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exits_one(tmp_path, capsys):
    assert cli.main(["profile", "--config", write_json(tmp_path / "bad.json", {"widths": [1]})]) == 1
    assert cli.main(["profile", "--config", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["profile", "--threads", "0"]) == 1
    assert "invalid input" in capsys.readouterr().err


def test_threads_flag_and_env(monkeypatch, capsys):
    assert cli.main(["profile", "--threads", "1"]) == 0
    monkeypatch.setenv("SEGSTITCH_THREADS", "1")
    assert cli.main(["profile"]) == 0


def test_gradcheck_exit_codes(monkeypatch, capsys):
    import segstitch.gradcheck as G

    monkeypatch.setattr(G, "run_suite", lambda seed, include_model: [GradCheckResult("x", 1e-6, 0.0)])
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(G, "run_suite", lambda seed, include_model: [GradCheckResult("x", 3e-4, 0.0)])
    assert cli.main(["gradcheck", "--skip-model"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_phantom_from_spec(tmp_path, capsys):
    spec = {"canvas": [12, 10, 8], "noise": 0.05, "seed": 1,
            "primitives": [{"kind": "ellipsoid", "center": [6, 5, 4], "label": 1, "radii": [3, 3, 2]}]}
    cfg = write_json(tmp_path / "spec.json", [spec, spec])
    assert cli.main(["phantom", "--config", cfg, "--out-dir", str(tmp_path / "d"), "--val", "1", "--seed", "5"]) == 0
    entries = read_manifest(tmp_path / "d" / "manifest.json")
    assert [e["split"] for e in entries] == ["train", "val"] and [e["seed"] for e in entries] == [5, 6]
    assert read_volume(entries[0]["path"]).shape == (12, 10, 8)


def test_train_eval_segment_round_trip(tmp_path, small_cfg, small_manifest, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", small_cfg, "--manifest", str(small_manifest), "--out-dir", str(run)]) == 0
    assert (run / "latest.ckpt").exists() and (run / "log.csv").exists()
    ckpt = str(run / "latest.ckpt")
    assert cli.main(["train", "--config", small_cfg, "--manifest", str(small_manifest), "--out-dir", str(run),
                     "--epochs", "3", "--resume", ckpt]) == 0
    assert "epoch 3" in capsys.readouterr().out

    assert cli.main(["eval", "--checkpoint", ckpt, "--manifest", str(small_manifest),
                     "--out-dir", str(tmp_path / "ev")]) == 0
    assert "mean" in capsys.readouterr().out and (tmp_path / "ev" / "report.csv").exists()

    vol = read_manifest(small_manifest)[0]["path"]
    seg = tmp_path / "seg"
    assert cli.main(["segment", "--checkpoint", ckpt, "--volume", vol, "--heatmaps", "--out-dir", str(seg)]) == 0
    out = read_volume(seg / "phantom_000_seg.vol")
    assert out.shape == (16, 16, 16) and out.num_classes == 3
    assert (seg / "attn_block00_z000.pgm").exists() and (seg / "attn_block03_coarse.pgm").exists()


def test_runtime_failure_exits_two(tmp_path, small_manifest, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b'{"format": "segstitch-checkpoint", "version": 1, "tensors": []}\n')
    assert cli.main(["eval", "--checkpoint", str(bad), "--manifest", str(small_manifest)]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path), "--manifest", str(small_manifest)]) == 2


def test_ablate(tmp_path, small_manifest, capsys):
    grid = {"model": small_model().to_dict(), "train": {"max_epochs": 1}, "variants": ["full", "no_ode"]}
    cfg = write_json(tmp_path / "grid.json", grid)
    assert cli.main(["ablate", "--config", cfg, "--manifest", str(small_manifest), "--out-dir", str(tmp_path)]) == 0
    assert "no_ode" in capsys.readouterr().out
    assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 3
