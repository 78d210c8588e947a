"""SGD-momentum training on volume manifests, evaluation and resumable state."""
from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, NonFiniteError
from .losses import soft_dice_loss
from .metrics import segmentation_report, write_report_csv
from .model import ModelConfig, ModelParams, build_model, forward, predict_labels
from .tensor import Tensor
from .volio import VolumeSample, preprocess, read_manifest, read_volume

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_mdsc")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.99
    batch_size: int = 2
    max_epochs: int = 1000
    seed: int = 0
    loss: str = "neg_soft_dice"
    eval_every: int = 1
    checkpoint_dir: str | None = None
    # polynomial decay (1 - epoch/max_epochs)^power; 0 keeps lr constant
    lr_power: float = 0.9
    # "random" crops (training augmentation) or "center" crops for training batches
    train_crop: str = "random"
    log_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.loss != "neg_soft_dice":
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.train_crop not in ("random", "center"):
            raise ConfigurationError(f"train_crop must be 'random' or 'center', got {self.train_crop!r}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int
    params: ModelParams
    velocity: dict
    rng: np.random.Generator
    best_mdsc: float = -1.0
    history: list = field(default_factory=list)  # one dict per epoch, keys LOG_COLUMNS


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Rate used during 0-based ``epoch``."""
    if cfg.lr_power == 0 or cfg.max_epochs == 0:
        return cfg.lr
    return cfg.lr * (1.0 - epoch / cfg.max_epochs) ** cfg.lr_power


def load_split(manifest, split: str) -> list:
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    return [read_volume(e["path"]) for e in entries if e["split"] == split]


def _batch(samples: list) -> tuple[Tensor, np.ndarray]:
    x = np.stack([s.image for s in samples]).astype(T.default_dtype())
    y = np.stack([s.label for s in samples])
    return Tensor(x), y


def _check_classes(samples: list, cfg: ModelConfig):
    for s in samples:
        if s.num_classes != cfg.num_classes:
            raise ConfigurationError(f"volume declares {s.num_classes} classes, model predicts {cfg.num_classes}")
        if s.image.shape[0] != cfg.in_channels:
            raise ConfigurationError(f"volume has {s.image.shape[0]} channels, model expects {cfg.in_channels}")


def _nonfinite_group(params: ModelParams) -> str | None:
    for name, t in params.named().items():
        if t.grad is not None and not np.isfinite(t.grad).all():
            return name
    return None


def train_step(params: ModelParams, velocity: dict, x: Tensor, y: np.ndarray, lr: float, momentum: float,
               where: str = "") -> float:
    params.zero_grad()
    loss = soft_dice_loss(forward(x, params), y)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"{where}: loss is {value}")
    loss.backward()
    bad = _nonfinite_group(params)
    if bad is not None:
        raise NonFiniteError(f"{where}: non-finite gradient in parameter group {bad}")
    named = params.named()
    names = list(named)
    ps = [named[n] for n in names]
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in ps]
    T.sgd_momentum_step(ps, grads, [velocity[n] for n in names], lr, momentum)
    return value


def evaluate_samples(params: ModelParams, samples: list, with_hd95: bool = False) -> tuple[list, list]:
    """Center-crop each volume, return per-volume (loss, report)."""
    cfg = params.config
    losses, reports = [], []
    with T.no_grad():
        for s in samples:
            s = preprocess(s, cfg.input_shape, mode="eval")
            x, y = _batch([s])
            logits = forward(x, params)
            losses.append(soft_dice_loss(logits, y).item())
            reports.append(segmentation_report(predict_labels(logits)[0], s.label, cfg.num_classes, s.spacing,
                                               with_hd95))
    return losses, reports


def _log_row(path, row: dict | None, header: bool = False):
    if path is None:
        return
    with open(path, "w" if header else "a", newline="") as f:
        w = csv.writer(f)
        if header:
            w.writerow(LOG_COLUMNS)
        else:
            w.writerow([row["epoch"], f"{row['lr']:.8g}", f"{row['train_loss']:.8f}",
                        "" if row["val_loss"] is None else f"{row['val_loss']:.8f}",
                        "" if row["val_mdsc"] is None else f"{row['val_mdsc']:.8f}"])


def read_log(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (None if r[k] == "" else (int(r[k]) if k == "epoch" else float(r[k]))) for k in LOG_COLUMNS})
    return out


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    params = build_model(model_cfg, train_cfg.seed)
    velocity = {n: np.zeros_like(t.data) for n, t in params.named().items()}
    return TrainState(0, params, velocity, np.random.default_rng(train_cfg.seed))


def save_state(path, state: TrainState, train_cfg: TrainConfig) -> None:
    extra = {"rng": state.rng.bit_generator.state, "best_mdsc": state.best_mdsc, "history": state.history,
             "train_config": train_cfg.to_dict()}
    save_checkpoint(path, state.params, state.epoch, state.velocity, extra)


def load_state(path) -> TrainState:
    params, st = load_checkpoint(path)
    extra = st["extra"]
    rng = np.random.default_rng()
    if "rng" in extra:
        rng.bit_generator.state = extra["rng"]
    velocity = st["velocity"] or {n: np.zeros_like(t.data) for n, t in params.named().items()}
    return TrainState(st["epoch"], params, velocity, rng, extra.get("best_mdsc", -1.0), extra.get("history", []))


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, manifest, resume=None,
          stop_after: int | None = None, verbose: bool = False) -> TrainState:
    """Run epochs ``state.epoch .. max_epochs-1``.

    Every epoch draws a permutation and per-sample crop seeds from the state
    generator, so resuming from a checkpoint replays the same data order.
    ``stop_after`` ends the run early after that many epochs in this call (the
    lr schedule still follows ``max_epochs``).
    """
    train_cfg.validate()
    model_cfg.validate()
    train_set = load_split(manifest, "train")
    if not train_set:
        raise ConfigurationError("manifest has no training volumes")
    val_set = load_split(manifest, "val")
    _check_classes(train_set + val_set, model_cfg)

    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        os.makedirs(ckpt_dir, exist_ok=True)
    log_path = train_cfg.log_path or (str(ckpt_dir / "log.csv") if ckpt_dir is not None else None)

    if resume is not None:
        state = load_state(resume)
        if state.params.config.to_dict() != model_cfg.to_dict():
            raise ConfigurationError("checkpoint config differs from the requested model config")
        if log_path is not None:
            _log_row(log_path, None, header=True)
            for row in state.history:
                _log_row(log_path, row)
    else:
        state = init_state(model_cfg, train_cfg)
        _log_row(log_path, None, header=True)

    params = state.params
    crop = model_cfg.input_shape
    done = 0
    while state.epoch < train_cfg.max_epochs and (stop_after is None or done < stop_after):
        epoch = state.epoch
        lr = learning_rate(train_cfg, epoch)
        order = state.rng.permutation(len(train_set))
        crop_seeds = state.rng.integers(0, 2 ** 31, size=len(train_set))
        losses = []
        for b in range(0, len(order), train_cfg.batch_size):
            idx = order[b:b + train_cfg.batch_size]
            mode = "train" if train_cfg.train_crop == "random" else "eval"
            batch = [preprocess(train_set[i], crop, int(crop_seeds[i]), mode) for i in idx]
            x, y = _batch(batch)
            where = f"epoch {epoch} batch {b // train_cfg.batch_size}"
            losses.append(train_step(params, state.velocity, x, y, lr, train_cfg.momentum, where))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": None, "val_mdsc": None}
        last = epoch + 1 == train_cfg.max_epochs
        if val_set and ((epoch + 1) % train_cfg.eval_every == 0 or last):
            vl, reps = evaluate_samples(params, val_set)
            row["val_loss"] = float(np.mean(vl))
            row["val_mdsc"] = float(np.mean([r.mean_dice for r in reps]))
        state.history.append(row)
        state.epoch += 1
        done += 1
        _log_row(log_path, row)
        if verbose:
            print(" ".join(f"{k}={v}" for k, v in row.items()), flush=True)
        if ckpt_dir is not None:
            if row["val_mdsc"] is not None and row["val_mdsc"] > state.best_mdsc:
                state.best_mdsc = row["val_mdsc"]
                save_state(ckpt_dir / "best.ckpt", state, train_cfg)
            save_state(ckpt_dir / "latest.ckpt", state, train_cfg)
        elif row["val_mdsc"] is not None:
            state.best_mdsc = max(state.best_mdsc, row["val_mdsc"])
    return state


@dataclass
class EvaluationResult:
    reports: dict  # volume name -> SegmentationReport
    losses: dict

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.mean_dice for r in self.reports.values()]))

    @property
    def std_dice(self) -> float:
        return float(np.std([r.mean_dice for r in self.reports.values()]))

    @property
    def mean_hd95(self) -> float | None:
        vals = [r.mean_hd95 for r in self.reports.values() if r.mean_hd95 is not None]
        return float(np.mean(vals)) if vals else None

    def table(self) -> str:
        lines = [f"{'volume':<24}  {'mDSC':>7}  {'HD95':>8}"]
        for name, r in self.reports.items():
            h = r.mean_hd95
            lines.append(f"{name:<24}  {r.mean_dice:7.4f}  {'undef' if h is None else f'{h:.3f}':>8}")
        h = self.mean_hd95
        lines.append(f"{'mean':<24}  {self.mean_dice:7.4f}  {'undef' if h is None else f'{h:.3f}':>8}")
        lines.append(f"{'std':<24}  {self.std_dice:7.4f}")
        return "\n".join(lines)


def evaluate(checkpoint, manifest, split: str = "val", with_hd95: bool = True, csv_path=None) -> EvaluationResult:
    params = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)[0]
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    entries = [e for e in entries if e["split"] == split]
    samples = [read_volume(e["path"]) for e in entries]
    _check_classes(samples, params.config)
    losses, reports = evaluate_samples(params, samples, with_hd95)
    names = [Path(e["path"]).name for e in entries]
    result = EvaluationResult(dict(zip(names, reports)), dict(zip(names, losses)))
    if csv_path is not None:
        write_report_csv(result.reports, csv_path)
    return result


def segment(params: ModelParams, sample: VolumeSample, maps: list | None = None) -> VolumeSample:
    """Center-crop inference; returns the predicted label volume with a zero image of matching shape."""
    cfg = params.config
    s = preprocess(sample, cfg.input_shape, mode="eval")
    with T.no_grad():
        logits = forward(_batch([s])[0], params, maps=maps)
    labels = predict_labels(logits)[0]
    return VolumeSample(s.image, labels, s.spacing, cfg.num_classes)
