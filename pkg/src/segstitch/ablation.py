"""Variant grid: attention/ODE on-off plus ODE function and replacement swaps."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, build_model
from .profile import count_params
from .train import TrainConfig, train

# overrides applied on top of the base model config
VARIANTS = {
    "full": {},
    "no_attention": {"attention_enabled": False},
    "no_ode": {"ode_enabled": False},
    "no_attention_no_ode": {"attention_enabled": False, "ode_enabled": False},
    "sin": {"ode_variant": "sin"},
    "tanh": {"ode_variant": "tanh"},
    "sigmoid": {"ode_kind": "sigmoid"},
    "autoencoder": {"ode_kind": "autoencoder"},
}

ABLATION_COLUMNS = ("variant", "seed", "params", "train_loss", "val_loss", "mdsc")


@dataclass
class AblationConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        return cls(**d)


@dataclass
class AblationRow:
    variant: str
    seed: int
    params: int
    train_loss: float
    val_loss: float | None
    mdsc: float | None
    history: list = field(default_factory=list, repr=False)


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
    return dataclasses.replace(base, **VARIANTS[variant])


def ablate(grid: AblationConfig, manifest, csv_path=None, verbose: bool = False) -> list:
    """Train every (variant, seed) with identical data, seed and budget.

    The model seed and the data-order seed are the same per cell, so variants
    of one seed see the same crops in the same order.
    """
    base = ModelConfig(**grid.model) if isinstance(grid.model, dict) else grid.model
    rows = []
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            csv.writer(f).writerow(ABLATION_COLUMNS)
    for seed in grid.seeds:
        for variant in grid.variants:
            cfg = variant_config(base, variant)
            tcfg = TrainConfig(**{**grid.train, "seed": int(seed), "checkpoint_dir": None, "log_path": None})
            state = train(tcfg, cfg, manifest)
            last = state.history[-1] if state.history else {"train_loss": float("nan"), "val_loss": None,
                                                             "val_mdsc": None}
            row = AblationRow(variant, int(seed), count_params(build_model(cfg)).total_params,
                              last["train_loss"], last["val_loss"], last["val_mdsc"], state.history)
            rows.append(row)
            if verbose:
                print(f"{variant:<20} seed={seed} params={row.params} train={row.train_loss:.4f} "
                      f"val={row.val_loss} mdsc={row.mdsc}", flush=True)
            if csv_path is not None:
                with open(csv_path, "a", newline="") as f:
                    csv.writer(f).writerow([row.variant, row.seed, row.params, f"{row.train_loss:.6f}",
                                            "" if row.val_loss is None else f"{row.val_loss:.6f}",
                                            "" if row.mdsc is None else f"{row.mdsc:.6f}"])
    return rows


def summarize(rows: list) -> dict:
    """variant -> mean over seeds of params, train_loss, val_loss, mdsc."""
    out = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        rs = [r for r in rows if r.variant == variant]
        out[variant] = {
            "params": rs[0].params,
            "train_loss": float(np.mean([r.train_loss for r in rs])),
            "val_loss": float(np.mean([r.val_loss for r in rs])) if all(r.val_loss is not None for r in rs) else None,
            "mdsc": float(np.mean([r.mdsc for r in rs])) if all(r.mdsc is not None for r in rs) else None,
        }
    return out


def delta_roughness(values) -> float:
    """Standard deviation of epoch-to-epoch differences of a curve."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size < 3:
        return 0.0
    return float(np.std(np.diff(v)))


def comparison_table(summary: dict) -> str:
    lines = [f"{'variant':<20}  {'params':>9}  {'train':>8}  {'val':>8}  {'mDSC':>7}"]
    fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
    for v, s in summary.items():
        lines.append(f"{v:<20}  {s['params']:>9}  {fmt(s['train_loss']):>8}  {fmt(s['val_loss']):>8}  "
                     f"{fmt(s['mdsc']):>7}")
    return "\n".join(lines)
