"""Parameter and multiply-accumulate accounting.

``count_flops`` walks the configuration symbolically and never touches tensor
data; convolution cost is K^3 * Cin * Cout per output voxel (per input voxel for
transposed convolutions), matmul cost m*k*n.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .attention import dual_attention_maccs
from .model import ModelConfig, ModelParams, _block_active
from .nmode import nmode_maccs


@dataclass
class CostReport:
    params: dict = field(default_factory=dict)  # module -> parameter count
    maccs: dict = field(default_factory=dict)  # module -> multiply-accumulates

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_maccs(self) -> int:
        return sum(self.maccs.values())

    @property
    def gflops(self) -> float:
        return 2 * self.total_maccs / 1e9

    def merge(self, other: "CostReport") -> "CostReport":
        return CostReport({**self.params, **other.params}, {**self.maccs, **other.maccs})

    def table(self) -> str:
        modules = list(dict.fromkeys(list(self.params) + list(self.maccs)))
        width = max([len(m) for m in modules] + [6])
        lines = [f"{'module':<{width}}  {'params':>12}  {'maccs':>15}"]
        for m in modules:
            p = self.params.get(m)
            a = self.maccs.get(m)
            lines.append(f"{m:<{width}}  {'' if p is None else p:>12}  {'' if a is None else a:>15}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12}  {self.total_maccs:>15}")
        lines.append(f"GFLOPs = {self.gflops:.6f}")
        return "\n".join(lines)


def count_params(params: ModelParams, depth: int = 1) -> CostReport:
    """Exact counts grouped by the first ``depth`` components of each parameter name."""
    groups: dict = {}
    for name, t in params.named().items():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + int(t.size)
    return CostReport(params=groups)


def matmul_maccs(m: int, k: int, n: int) -> int:
    return m * k * n


def conv_maccs(k: int, c_in: int, c_out: int, voxels: int) -> int:
    return k ** 3 * c_in * c_out * voxels


def _prod(shape) -> int:
    out = 1
    for v in shape:
        out *= int(v)
    return out


def _ode_maccs(cfg: ModelConfig, n: int, c: int) -> int:
    if cfg.ode_kind == "nmode":
        return nmode_maccs(n, c, cfg.solver)
    if cfg.ode_kind == "autoencoder":
        bn = cfg.ae_bottleneck or c // 2
        return 2 * n * c * bn
    return 0


def count_flops(cfg: ModelConfig, batch: int = 1) -> CostReport:
    """Forward-pass multiply-accumulates per top-level module for one batch."""
    w = cfg.stage_widths
    p = cfg.patch_size
    maccs = {}
    n0 = _prod(cfg.stage_grid(0))
    maccs["stem"] = n0 * p ** 3 * cfg.in_channels * w[0] + n0 * p ** 3 * cfg.in_channels
    for s, c in enumerate(w):
        n = _prod(cfg.stage_grid(s))
        total = 0
        if s > 0:
            total += conv_maccs(3, w[s - 1], c, n)
        if _block_active(cfg):
            per_block = 0
            if cfg.attention_enabled:
                per_block += dual_attention_maccs(n, c, cfg.layout(s).window_tokens, cfg.share_fine_value,
                                                  cfg.independent_query)
            if cfg.encoder_ode:
                per_block += _ode_maccs(cfg, n, c)
            if cfg.mlp_ratio > 0:
                per_block += 2 * matmul_maccs(n, c, cfg.mlp_ratio * c)
            total += cfg.blocks_per_stage * per_block
        maccs[f"enc{s + 1}"] = total
    for s in range(len(w) - 1, 0, -1):
        c_in, c = w[s], w[s - 1]
        n_in = _prod(cfg.stage_grid(s))
        n_out = _prod(cfg.stage_grid(s - 1))
        total = conv_maccs(2, c_in, c, n_in) + conv_maccs(3, 2 * c, c, n_out)
        if cfg.decoder_ode_active:
            total += _ode_maccs(cfg, n_out, c)
        maccs[f"dec{s}"] = total
    voxels = _prod(cfg.input_shape)
    maccs["head"] = conv_maccs(p, w[0], w[0], n0) + conv_maccs(1, w[0], cfg.num_classes, voxels)
    return CostReport(maccs={k: v * batch for k, v in maccs.items()})


def profile(cfg: ModelConfig, params: ModelParams | None = None) -> CostReport:
    from .model import build_model

    params = params or build_model(cfg)
    return count_params(params).merge(count_flops(cfg))
