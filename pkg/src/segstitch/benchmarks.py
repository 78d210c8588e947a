"""Reference phantom benchmarks shared by scripts, CLI and acceptance tests."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ablation import VARIANTS, AblationConfig, ablate, delta_roughness, summarize
from .model import ModelConfig
from .nmode import SolverConfig
from .train import TrainConfig, evaluate, train
from .volio import benchmark_phantom_specs, emit_dataset, write_manifest

CANVAS = (64, 64, 32)


def tiny_config(**overrides) -> ModelConfig:
    """Widths 8/16/32/64 at p=2 on the 64x64x32 phantom canvas, 3 classes."""
    base = dict(in_channels=1, num_classes=3, input_shape=CANVAS, patch_size=2, stage_widths=(8, 16, 32, 64),
                heads=(2, 2, 4, 4), window=64, blocks_per_stage=1, solver=SolverConfig("euler", 1.0, 4))
    base.update(overrides)
    return ModelConfig(**base)


def overfit_dataset(out_dir, n: int = 4, seed: int = 0) -> Path:
    """``n`` phantoms used as both the train and the monitoring split."""
    manifest = emit_dataset(benchmark_phantom_specs(n, seed, CANVAS), ["train"] * n, out_dir)
    entries = json.loads(Path(manifest).read_text())
    entries += [{**e, "split": "val"} for e in entries]
    write_manifest(entries, manifest)
    return manifest


@dataclass
class OverfitResult:
    final_train_loss: float
    train_mdsc: float
    epochs: int
    seconds: float
    history: list


def run_overfit(out_dir, epochs: int = 300, seed: int = 0, train_cfg: TrainConfig | None = None,
                model_cfg: ModelConfig | None = None, verbose: bool = False) -> OverfitResult:
    manifest = overfit_dataset(Path(out_dir) / "data", seed=seed)
    train_cfg = train_cfg or TrainConfig(lr=0.02, momentum=0.99, batch_size=2, max_epochs=epochs, seed=seed,
                                         eval_every=25, log_path=str(Path(out_dir) / "log.csv"))
    model_cfg = model_cfg or tiny_config()
    t0 = time.perf_counter()
    state = train(train_cfg, model_cfg, manifest, verbose=verbose)
    seconds = time.perf_counter() - t0
    res = evaluate(state.params, manifest, "train", with_hd95=False)
    return OverfitResult(state.history[-1]["train_loss"], res.mean_dice, state.epoch, seconds, state.history)


def ablation_dataset(out_dir, n_train: int = 4, n_val: int = 2, seed: int = 100) -> Path:
    """Held-out phantom benchmark: ``n_train`` training and ``n_val`` validation volumes."""
    specs = benchmark_phantom_specs(n_train + n_val, seed, CANVAS)
    return emit_dataset(specs, ["train"] * n_train + ["val"] * n_val, out_dir)


@dataclass
class AblationOutcome:
    rows: list
    summary: dict
    roughness: dict  # variant -> mean over seeds of delta_roughness(val_loss)
    seconds: float


def run_ablation(out_dir, seeds=(0, 1, 2), epochs: int = 200, variants=None, lr: float = 0.02,
                 verbose: bool = False) -> AblationOutcome:
    """Every variant trained per seed on identical data and budget, validated every epoch."""
    out_dir = Path(out_dir)
    manifest = ablation_dataset(out_dir / "data")
    grid = AblationConfig(model=tiny_config().to_dict(),
                          train={"lr": lr, "momentum": 0.99, "batch_size": 2, "max_epochs": epochs,
                                 "eval_every": 1},
                          variants=list(variants or VARIANTS), seeds=list(seeds))
    t0 = time.perf_counter()
    rows = ablate(grid, manifest, out_dir / "ablation.csv", verbose=verbose)
    seconds = time.perf_counter() - t0
    roughness = {}
    for v in grid.variants:
        curves = [[h["val_loss"] for h in r.history] for r in rows if r.variant == v]
        roughness[v] = float(np.mean([delta_roughness(c) for c in curves]))
    return AblationOutcome(rows, summarize(rows), roughness, seconds)
