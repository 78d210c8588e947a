"""Segmentation measures (Dice, HD95) and feature/attention diagnostics."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import DimensionError, FormatError

NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _check_shapes(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dice(pred, gt, c: int) -> float:
    """2|P&G| / (|P|+|G|) for class ``c``; 1.0 when the class is absent from both."""
    pred, gt = _check_shapes(pred, gt)
    p, g = pred == c, gt == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (the volume exterior counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = np.ones_like(mask)
    for off in NEIGHBOURS:
        sl = tuple(slice(1 + o, n + 1 + o) for o, n in zip(off, mask.shape))
        inner &= padded[sl]
    return mask & ~inner


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # nearest-neighbour search on the tree, then the distance is recomputed
    # from coordinates so it is the same float an all-pairs scan would give
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def surface_distances(pred, gt, c: int, spacing=(1.0, 1.0, 1.0)) -> np.ndarray | None:
    """Pooled boundary-to-boundary nearest distances in both directions (mm), or None if undefined."""
    pred, gt = _check_shapes(pred, gt)
    bp = np.argwhere(boundary(pred == c)) * np.asarray(spacing, float)
    bg = np.argwhere(boundary(gt == c)) * np.asarray(spacing, float)
    if len(bp) == 0 or len(bg) == 0:
        return None
    return np.concatenate([_nearest(bp, bg), _nearest(bg, bp)])


def hd95(pred, gt, c: int, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """95th percentile (linear) of pooled surface distances; None when either mask is empty."""
    d = surface_distances(pred, gt, c, spacing)
    if d is None:
        return None
    return float(np.percentile(d, 95))


def hausdorff(pred, gt, c: int, spacing=(1.0, 1.0, 1.0)) -> float | None:
    d = surface_distances(pred, gt, c, spacing)
    return None if d is None else float(d.max())


@dataclass
class SegmentationReport:
    dice: list
    hd95: list  # None where undefined
    classes: int = 0

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice[1:]))

    @property
    def mean_hd95(self) -> float | None:
        vals = [h for h in self.hd95[1:] if h is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list:
        return [{"class": c, "dice": self.dice[c], "hd95": self.hd95[c]} for c in range(1, len(self.dice))]

    def table(self) -> str:
        lines = [f"{'class':>5}  {'dice':>7}  {'hd95':>8}"]
        for r in self.rows():
            h = "undef" if r["hd95"] is None else f"{r['hd95']:.3f}"
            lines.append(f"{r['class']:>5}  {r['dice']:7.4f}  {h:>8}")
        mh = self.mean_hd95
        lines.append(f"{'mean':>5}  {self.mean_dice:7.4f}  {'undef' if mh is None else f'{mh:.3f}':>8}")
        return "\n".join(lines)


def segmentation_report(pred, gt, num_classes: int, spacing=(1.0, 1.0, 1.0), with_hd95: bool = True) -> SegmentationReport:
    """Entry 0 (background) is kept for indexing but left out of the means."""
    d = [dice(pred, gt, c) for c in range(num_classes)]
    h = [hd95(pred, gt, c, spacing) if with_hd95 else None for c in range(num_classes)]
    return SegmentationReport(d, h, num_classes)


def write_report_csv(reports: dict, path) -> None:
    """One row per (volume, class) with columns volume, class, dice, hd95."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["volume", "class", "dice", "hd95"])
        for name, rep in reports.items():
            for r in rep.rows():
                w.writerow([name, r["class"], f"{r['dice']:.6f}", "" if r["hd95"] is None else f"{r['hd95']:.6f}"])


# ---------------------------------------------------------------------------
# channel statistics


@dataclass
class ChannelStats:
    means: np.ndarray
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    edges: np.ndarray = field(default_factory=lambda: np.zeros(0))


def channel_mean_stats(features, bins: int = 10) -> ChannelStats:
    """Per-channel mean over batch and spatial axes of ``[B, C, ...]`` plus a histogram of those means."""
    data = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if data.ndim < 2 or data.shape[0] < 1:
        raise DimensionError(f"features must be [B, C, ...] with B >= 1, got {data.shape}")
    axes = (0,) + tuple(range(2, data.ndim))
    means = data.mean(axis=axes)
    counts, edges = np.histogram(means, bins=bins)
    return ChannelStats(means, counts, edges)


def write_channel_stats_csv(stats: ChannelStats, path) -> None:
    """Two blocks with fixed columns: channel,mean then bin_low,bin_high,count."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "mean"])
        for i, m in enumerate(stats.means):
            w.writerow([i, repr(float(m))])
        w.writerow([])
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, n in zip(stats.edges[:-1], stats.edges[1:], stats.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])


# ---------------------------------------------------------------------------
# heatmaps


def quantize(weights: np.ndarray) -> np.ndarray:
    """Global min-max map to 0..255; a constant input maps to mid-gray 128."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full(w.shape, 128, dtype=np.uint8)
    return np.rint((w - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D image, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    data = raw[m.end():]
    if len(data) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def attention_volume(maps, batch: int = 0) -> np.ndarray:
    """Mean fine-attention weight each token receives, laid out on the token grid ``[gx, gy, gz]``."""
    fine = np.asarray(maps.fine)[batch]  # [windows, heads, w, w]
    received = fine.mean(axis=(1, 2))  # average over heads and queries -> [windows, w]
    layout = maps.layout
    merged = T.window_merge(T.Tensor(received[None, :, :, None]), layout.window, layout.grid)
    return merged.data[0, ..., 0]


def export_attention_heatmap(weights, layout, path) -> list:
    """Write one PGM per z-slice of ``weights`` (a token-grid volume or an AttentionMaps).

    ``path`` is a filename prefix; files are ``<prefix>_z000.pgm`` and so on, plus
    ``<prefix>_coarse.pgm`` when coarse maps are available.  Quantization is
    global over the volume so slices stay comparable.
    """
    prefix = Path(path)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    coarse = None
    if hasattr(weights, "fine"):
        coarse = np.asarray(weights.coarse)[0]
        weights = attention_volume(weights)
    vol = np.asarray(weights, dtype=np.float64)
    if layout is not None and vol.shape != tuple(layout.grid):
        vol = vol.reshape(layout.grid)
    if vol.ndim == 2:
        vol = vol[..., None]
    if vol.ndim != 3:
        raise DimensionError(f"heatmap weights must be 2-D or 3-D, got {vol.shape}")
    q = quantize(vol)
    files = []
    for z in range(q.shape[2]):
        name = prefix.parent / f"{prefix.name}_z{z:03d}.pgm"
        write_pgm(q[:, :, z], name)
        files.append(name)
    if coarse is not None:
        name = prefix.parent / f"{prefix.name}_coarse.pgm"
        write_pgm(quantize(coarse), name)
        files.append(name)
    return files
