import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segstitch.attention import PatchGrid, dual_attention, init_attention
from segstitch.errors import DimensionError
from segstitch.metrics import (channel_mean_stats, dice, export_attention_heatmap, hausdorff, hd95, quantize,
                               read_pgm, segmentation_report, write_channel_stats_csv, write_pgm,
                               write_report_csv)
from segstitch import tensor as T
from segstitch.tensor import Tensor


def brute_dice(pred, gt, c):
    tp = np_ = ng = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        tp += (a == c) and (b == c)
        np_ += a == c
        ng += b == c
    return 1.0 if np_ + ng == 0 else 2.0 * tp / (np_ + ng)


def brute_boundary(mask):
    pts = []
    for idx in itertools.product(*(range(n) for n in mask.shape)):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                j = list(idx)
                j[axis] += step
                if not 0 <= j[axis] < mask.shape[axis] or not mask[tuple(j)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=float).reshape(-1, 3)


def brute_hd95(pred, gt, c):
    a, b = brute_boundary(pred == c), brute_boundary(gt == c)
    if len(a) == 0 or len(b) == 0:
        return None
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    return float(np.percentile(np.concatenate([d.min(axis=1), d.min(axis=0)]), 95))


def test_dice_examples():
    m = np.zeros((4, 4, 4), int)
    m[0, 0, :] = 1
    assert dice(m, m, 1) == 1.0
    other = np.zeros_like(m)
    other[3, 3, :] = 1
    assert dice(m, other, 1) == 0.0
    half = np.zeros_like(m)
    half[0, 0, 2:] = 1
    half[1, 1, :2] = 1
    assert dice(m, half, 1) == 0.5
    assert dice(np.zeros_like(m), np.zeros_like(m), 1) == 1.0
    with pytest.raises(DimensionError):
        dice(m, m[:3], 1)


def test_hd95_examples():
    a = np.zeros((8, 8, 8), int)
    b = np.zeros_like(a)
    a[0, 0, 0] = 1
    b[3, 4, 0] = 1
    assert hd95(a, b, 1) == 5.0
    assert hd95(a, a, 1) == 0.0
    assert hd95(a, np.zeros_like(a), 1) is None
    assert hd95(a, b, 1, spacing=(2.0, 2.0, 1.0)) == 10.0


def test_metrics_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p_fg = rng.uniform(0.05, 0.6)
        pred = (rng.random((8, 8, 8)) < p_fg).astype(int) * rng.integers(1, 3, (8, 8, 8))
        gt = (rng.random((8, 8, 8)) < p_fg).astype(int) * rng.integers(1, 3, (8, 8, 8))
        for c in (1, 2):
            assert dice(pred, gt, c) == brute_dice(pred, gt, c)
            assert hd95(pred, gt, c) == brute_hd95(pred, gt, c)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 6, 5)) < 0.3).astype(int)
    b = (rng.random((6, 6, 5)) < 0.3).astype(int)
    if not a.any() or not b.any():
        return
    assert dice(a, b, 1) == dice(b, a, 1)
    perm = rng.permutation(a.size)
    assert dice(a.ravel()[perm], b.ravel()[perm], 1) == dice(a, b, 1)
    assert hd95(a, b, 1) == hd95(b, a, 1)
    assert hd95(a, b, 1) <= hausdorff(a, b, 1)


def test_report_and_csv(tmp_path):
    gt = np.zeros((6, 6, 6), int)
    gt[1:3, 1:3, 1:3] = 1
    gt[4:, 4:, 4:] = 2
    rep = segmentation_report(gt, gt, 3)
    assert rep.mean_dice == 1.0 and rep.mean_hd95 == 0.0
    empty = segmentation_report(np.zeros_like(gt), gt, 3)
    assert empty.mean_dice == 0.0 and empty.mean_hd95 is None and "undef" in empty.table()
    path = tmp_path / "r.csv"
    write_report_csv({"a": rep, "b": empty}, path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["volume", "class", "dice", "hd95"]
    assert np.mean([float(r["dice"]) for r in rows]) == pytest.approx((rep.mean_dice + empty.mean_dice) / 2)
    assert rows[-1]["hd95"] == ""


def test_channel_stats_examples(tmp_path):
    assert not channel_mean_stats(np.zeros((2, 4, 3, 3, 3))).means.any()
    assert np.all(channel_mean_stats(np.full((1, 5, 2, 2, 2), 2.5)).means == 2.5)
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4, 4))
    stats = channel_mean_stats(Tensor(x), bins=4)
    for c in range(3):
        total, n = 0.0, 0
        for v in x[:, c].ravel():
            total += v
            n += 1
        assert abs(stats.means[c] - total / n) < 1e-6
    assert stats.counts.sum() == 3
    write_channel_stats_csv(stats, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[0] == "channel,mean" and "bin_low,bin_high,count" in text
    with pytest.raises(DimensionError):
        channel_mean_stats(np.zeros(3))


def test_quantize_examples():
    assert np.all(quantize(np.full((3, 3), 0.7)) == 128)
    ramp = quantize(np.linspace(-1, 4, 50))
    assert np.all(np.diff(ramp.astype(int)) >= 0) and ramp[0] == 0 and ramp[-1] == 255


def test_pgm_round_trip(tmp_path):
    img = quantize(np.random.default_rng(2).random((7, 9)))
    img[0, :4] = [9, 10, 13, 32]  # whitespace byte values right after the header
    write_pgm(img, tmp_path / "a.pgm")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_attention_heatmap_export(tmp_path):
    rng = np.random.default_rng(3)
    layout = PatchGrid((4, 4, 2), (2, 2, 2))
    with T.precision("f64"):
        p = init_attention(4, 2, 8, rng, std=0.5)
        _, maps = dual_attention(Tensor(rng.standard_normal((1, 32, 4))), p, layout)
    files = export_attention_heatmap(maps, layout, tmp_path / "h" / "attn")
    names = sorted(f.name for f in files)
    assert names == ["attn_coarse.pgm", "attn_z000.pgm", "attn_z001.pgm"]
    assert read_pgm(tmp_path / "h" / "attn_z000.pgm").shape == (4, 4)
    vol = rng.random((4, 4, 2))
    files = export_attention_heatmap(vol, layout, tmp_path / "v")
    q = quantize(vol)
    assert all(np.array_equal(read_pgm(f), q[:, :, z]) for z, f in enumerate(files))
