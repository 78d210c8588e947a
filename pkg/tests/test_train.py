import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_model
from segstitch import tensor as T
from segstitch.errors import ConfigurationError, NonFiniteError
from segstitch.losses import soft_dice_loss
from segstitch.model import build_model
from segstitch.tensor import Tensor
from segstitch.train import (LOG_COLUMNS, TrainConfig, evaluate, learning_rate, load_state, read_log, segment,
                             train, train_step)
from segstitch.volio import read_manifest, read_volume


def saturated(labels, k, scale=50.0, wrong=False):
    target = (labels + 1) % k if wrong else labels
    logits = np.zeros((labels.shape[0], k) + labels.shape[1:])
    for c in range(k):
        logits[:, c] = np.where(target == c, scale, -scale)
    return Tensor(logits, dtype=np.float64)


def test_loss_examples():
    labels = np.random.default_rng(0).integers(0, 3, (2, 4, 4, 4))
    with T.precision("f64"):
        assert abs(soft_dice_loss(saturated(labels, 3), labels).item() + 1.0) < 1e-3
        assert abs(soft_dice_loss(saturated(labels, 3, wrong=True), labels).item()) < 1e-3
        half = np.zeros((1, 4, 4, 4), int)
        half[0, :2] = 1
        v = half.size
        loss = soft_dice_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), half).item()
    assert loss == pytest.approx(-(2 * v / 4 + 1e-5) / (v / 2 + v / 2 + 1e-5), abs=1e-12)
    assert loss == pytest.approx(-0.5, abs=1e-6)


def test_loss_errors():
    with pytest.raises(ConfigurationError):
        soft_dice_loss(T.zeros((1, 1, 2, 2, 2)), np.zeros((1, 2, 2, 2), int))
    with pytest.raises(ConfigurationError):
        soft_dice_loss(T.zeros((1, 2, 2, 2, 2)), np.full((1, 2, 2, 2), 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30.0))
def test_loss_range(seed, scale):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (2, 3, 3, 3))
    loss = soft_dice_loss(Tensor(rng.standard_normal((2, 3, 3, 3, 3)) * scale), labels).item()
    assert -1.0 < loss <= 0.0


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.1, max_epochs=10)
    assert learning_rate(cfg, 0) == 0.1
    assert learning_rate(cfg, 5) == pytest.approx(0.1 * 0.5 ** 0.9)
    assert all(learning_rate(cfg, e) > learning_rate(cfg, e + 1) for e in range(9))
    assert learning_rate(TrainConfig(lr=0.1, max_epochs=10, lr_power=0), 7) == 0.1


def test_train_config_validation():
    for bad in ({"momentum": 1.0}, {"batch_size": 0}, {"loss": "ce"}, {"train_crop": "edge"}, {"lr": 0}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    cfg = TrainConfig(lr=0.2, seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_epochs_writes_header_only(tmp_path, small_manifest):
    log = tmp_path / "log.csv"
    state = train(TrainConfig(max_epochs=0, log_path=str(log)), small_model(), small_manifest)
    assert state.epoch == 0 and state.history == []
    assert log.read_text().strip() == ",".join(LOG_COLUMNS)
    fresh = build_model(small_model(), 0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(state.params.parameters(), fresh.parameters()))


def run(tmp, manifest, epochs=3, **kw):
    cfg = TrainConfig(lr=0.05, max_epochs=epochs, seed=2, checkpoint_dir=str(tmp), **kw)
    return train(cfg, small_model(), manifest)


def test_same_seed_same_curves(tmp_path, small_manifest):
    a = run(tmp_path / "a", small_manifest)
    b = run(tmp_path / "b", small_manifest)
    assert a.history == b.history
    assert read_log(tmp_path / "a" / "log.csv") == read_log(tmp_path / "b" / "log.csv")
    assert [r["epoch"] for r in a.history] == [0, 1, 2]
    assert all(r["val_mdsc"] is not None for r in a.history)


def test_resume_matches_uninterrupted(tmp_path, small_manifest):
    full = run(tmp_path / "full", small_manifest, epochs=4)
    cfg = TrainConfig(lr=0.05, max_epochs=4, seed=2, checkpoint_dir=str(tmp_path / "part"))
    partial = train(cfg, small_model(), small_manifest, stop_after=2)
    assert partial.epoch == 2
    resumed = train(cfg, small_model(), small_manifest, resume=tmp_path / "part" / "latest.ckpt")
    assert resumed.history == full.history
    for a, b in zip(resumed.params.parameters(), full.params.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert read_log(tmp_path / "part" / "log.csv") == read_log(tmp_path / "full" / "log.csv")


def test_resume_rejects_other_config(tmp_path, small_manifest):
    run(tmp_path / "r", small_manifest, epochs=1)
    with pytest.raises(ConfigurationError):
        train(TrainConfig(max_epochs=2), small_model(stage_widths=(8, 8, 8, 8)), small_manifest,
              resume=tmp_path / "r" / "latest.ckpt")


def test_checkpoints_written(tmp_path, small_manifest):
    state = run(tmp_path / "c", small_manifest, epochs=2)
    best = load_state(tmp_path / "c" / "best.ckpt")
    latest = load_state(tmp_path / "c" / "latest.ckpt")
    assert latest.epoch == 2 and latest.history == state.history
    assert best.best_mdsc == max(r["val_mdsc"] for r in best.history)


def test_non_finite_loss_aborts_with_location():
    params = build_model(small_model(), 0)
    params.stem.w_embed.data[:] = np.nan
    velocity = {n: np.zeros_like(t.data) for n, t in params.named().items()}
    x = Tensor(np.zeros((1, 1, 16, 16, 16)))
    with pytest.raises(NonFiniteError, match="epoch 3 batch 1"):
        train_step(params, velocity, x, np.zeros((1, 16, 16, 16), int), 0.1, 0.9, "epoch 3 batch 1")


def test_class_mismatch(small_manifest):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(max_epochs=1), small_model(num_classes=2), small_manifest)
    with pytest.raises(ConfigurationError):
        evaluate(build_model(small_model(num_classes=4)), small_manifest)


def test_evaluate_aggregates_match_csv(tmp_path, small_manifest):
    params = build_model(small_model(), 1)
    res = evaluate(params, small_manifest, "train", csv_path=tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    per_volume = {}
    for r in rows:
        per_volume.setdefault(r["volume"], []).append(float(r["dice"]))
    assert len(per_volume) == 3
    assert res.mean_dice == pytest.approx(np.mean([np.mean(v) for v in per_volume.values()]), abs=1e-6)
    assert "mean" in res.table()


def test_evaluate_constant_background_is_zero(small_manifest):
    params = build_model(small_model(), 0)
    params.head["conv.w"].data[:] = 0
    params.head["conv.b"].data[:] = [10.0, 0.0, 0.0]
    res = evaluate(params, small_manifest, "val")
    assert res.mean_dice == 0.0 and res.mean_hd95 is None


def test_segment_writes_readable_labels(tmp_path, small_manifest):
    from segstitch.volio import write_volume

    params = build_model(small_model(), 0)
    sample = read_volume(read_manifest(small_manifest)[0]["path"])
    maps = []
    out = segment(params, sample, maps)
    assert out.shape == (16, 16, 16) and out.label.max() < 3
    assert len(maps) == 4
    write_volume(out, tmp_path / "seg.vol")
    assert np.array_equal(read_volume(tmp_path / "seg.vol").label, out.label)
