"""Encoder/decoder assembly.

Layout: stem (p^3 patching, position weights, linear embed) feeding stage 1;
stages 2-4 each start with a stride-2 conv + GroupNorm and every stage runs
``blocks_per_stage`` transformer blocks (layer norm -> dual attention -> ODE
site -> residual).  The decoder upsamples with 2^3 transposed convs, concatenates
the matching encoder features, fuses with a 3^3 conv and runs an ODE site; the
head upsamples tokens back to voxels and applies a 1^3 conv.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, PatchEmbedParams, PatchGrid, dual_attention, embed_patches,
                        init_attention, init_patch_embed)
from .errors import ConfigurationError, DimensionError, UsageError
from .init import ones_param, trunc_normal, zeros_param
from .nmode import (REPLACEMENTS, AutoencoderParams, NmOdeParams, SolverConfig, init_autoencoder, init_nmode,
                    nmode_block, replacement_module)
from .tensor import Tensor

ODE_FUNCTIONS = ("sin2", "sin", "tanh")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    input_shape: tuple = (64, 64, 32)
    patch_size: int = 2
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 3
    heads: tuple = (2, 2, 4, 4)
    window: int = 64
    # explicit per-stage axial windows; derived from ``window`` when omitted
    windows: tuple | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    ode_variant: str = "sin2"
    # "nmode", "sigmoid" or "autoencoder" at every ODE site
    ode_kind: str = "nmode"
    ae_bottleneck: int | None = None
    residual: bool = True
    decoder_ode: bool = True
    attention_enabled: bool = True
    ode_enabled: bool = True
    share_fine_value: bool = False
    independent_query: bool = False
    mlp_ratio: int = 0
    groups: int = 4
    init_std: float = 0.02
    # convolution weights; None means 1/sqrt(fan_in)
    conv_init_std: float | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.heads = tuple(int(v) for v in self.heads)
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.windows is not None:
            self.windows = tuple(tuple(int(v) for v in w) for w in self.windows)
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths)

    def validate(self):
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must have three extents")
        if len(self.heads) != self.n_stages:
            raise ConfigurationError(f"{len(self.heads)} head counts for {self.n_stages} stages")
        factor = self.patch_size * 2 ** (self.n_stages - 1)
        for axis, n in zip("HWD", self.input_shape):
            if n % factor:
                raise ConfigurationError(
                    f"input axis {axis}={n} is not divisible by patch_size*2^(stages-1)={factor}")
        for s, (c, h) in enumerate(zip(self.stage_widths, self.heads), start=1):
            if c % h:
                raise ConfigurationError(f"stage {s}: width {c} not divisible by {h} heads")
            if c % self.groups:
                raise ConfigurationError(f"stage {s}: width {c} not divisible by {self.groups} norm groups")
        if self.ode_variant not in ODE_FUNCTIONS:
            raise ConfigurationError(f"unknown ode_variant {self.ode_variant!r}")
        if self.ode_kind not in ("nmode",) + REPLACEMENTS:
            raise ConfigurationError(f"unknown ode_kind {self.ode_kind!r}")
        if self.windows is not None and len(self.windows) != self.n_stages:
            raise ConfigurationError(f"{len(self.windows)} windows for {self.n_stages} stages")
        for s in range(self.n_stages):
            PatchGrid(self.stage_grid(s), self.stage_window(s))

    def stage_grid(self, s: int) -> tuple:
        """Token grid of 0-based stage ``s``."""
        base = [n // self.patch_size for n in self.input_shape]
        return tuple(n // 2 ** s for n in base)

    def stage_window(self, s: int) -> tuple:
        if self.windows is not None:
            return self.windows[s]
        side = max(1, round(self.window ** (1 / 3)))
        out = []
        for g in self.stage_grid(s):
            w = min(side, g)
            while g % w:
                w -= 1
            out.append(w)
        return tuple(out)

    def layout(self, s: int) -> PatchGrid:
        return PatchGrid(self.stage_grid(s), self.stage_window(s))

    @property
    def encoder_ode(self) -> bool:
        return self.ode_enabled

    @property
    def decoder_ode_active(self) -> bool:
        return self.ode_enabled and self.decoder_ode

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OdeSite:
    kind: str
    nmode: NmOdeParams | None = None
    autoencoder: AutoencoderParams | None = None

    def named(self) -> dict:
        if self.nmode is not None:
            return self.nmode.named()
        if self.autoencoder is not None:
            return self.autoencoder.named()
        return {}


@dataclass
class BlockParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    attention: AttentionParams | None
    ode: OdeSite | None
    mlp: dict | None = None

    def named(self) -> dict:
        out = {"norm.gamma": self.norm_gamma, "norm.beta": self.norm_beta}
        if self.attention is not None:
            out.update({f"attn.{k}": v for k, v in self.attention.named().items()})
        if self.ode is not None:
            out.update({f"ode.{k}": v for k, v in self.ode.named().items()})
        if self.mlp is not None:
            out.update({f"mlp.{k}": v for k, v in self.mlp.items()})
        return out


@dataclass
class StageParams:
    down: dict | None
    blocks: list

    def named(self) -> dict:
        out = {}
        if self.down is not None:
            out.update({f"down.{k}": v for k, v in self.down.items()})
        for j, b in enumerate(self.blocks):
            out.update({f"block{j}.{k}": v for k, v in b.named().items()})
        return out


@dataclass
class DecoderParams:
    up_w: Tensor
    up_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    ode: OdeSite | None

    def named(self) -> dict:
        out = {"up.w": self.up_w, "up.b": self.up_b, "fuse.w": self.fuse_w, "fuse.b": self.fuse_b}
        if self.ode is not None:
            out.update({f"ode.{k}": v for k, v in self.ode.named().items()})
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    stem: PatchEmbedParams
    stages: list
    decoder: list  # deepest first: decoder[0] upsamples stage n -> n-1
    head: dict

    def named(self) -> dict:
        """Stable name -> tensor mapping shared by checkpoints and counting."""
        out = {f"stem.{k}": v for k, v in self.stem.named().items()}
        for s, st in enumerate(self.stages, start=1):
            out.update({f"enc{s}.{k}": v for k, v in st.named().items()})
        n = len(self.stages)
        for i, d in enumerate(self.decoder):
            out.update({f"dec{n - 1 - i}.{k}": v for k, v in d.named().items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def parameters(self) -> list:
        return list(self.named().values())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


def _ode_site(cfg: ModelConfig, channels: int, rng: np.random.Generator) -> OdeSite:
    if cfg.ode_kind == "nmode":
        return OdeSite("nmode", nmode=init_nmode(channels, rng, cfg.ode_variant))
    if cfg.ode_kind == "autoencoder":
        return OdeSite("autoencoder", autoencoder=init_autoencoder(channels, rng, cfg.ae_bottleneck, cfg.init_std))
    return OdeSite("sigmoid")


def _block_active(cfg: ModelConfig) -> bool:
    return cfg.attention_enabled or cfg.encoder_ode or cfg.mlp_ratio > 0


def _conv_weight(rng, shape: tuple, fan_in: int, cfg: ModelConfig) -> Tensor:
    std = cfg.conv_init_std if cfg.conv_init_std is not None else 1.0 / np.sqrt(fan_in)
    return trunc_normal(rng, shape, std)


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialize every tensor deterministically from ``seed``.

    Attention, embed, ODE-replacement and MLP projections use ``init_std``;
    convolutions default to 1/sqrt(fan_in) so the unnormalized decoder path
    keeps unit-scale activations.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    widths = cfg.stage_widths
    stem = init_patch_embed(cfg.in_channels, cfg.patch_size, widths[0], rng, std)
    stages = []
    for s, c in enumerate(widths):
        down = None
        if s > 0:
            down = {"w": _conv_weight(rng, (c, widths[s - 1], 3, 3, 3), 27 * widths[s - 1], cfg),
                    "b": zeros_param((c,)),
                    "gn.gamma": ones_param((c,)), "gn.beta": zeros_param((c,))}
        blocks = []
        if _block_active(cfg):
            window = cfg.layout(s).window_tokens
            for _ in range(cfg.blocks_per_stage):
                attn = init_attention(c, cfg.heads[s], window, rng, std, cfg.share_fine_value,
                                      cfg.independent_query) if cfg.attention_enabled else None
                ode = _ode_site(cfg, c, rng) if cfg.encoder_ode else None
                mlp = None
                if cfg.mlp_ratio > 0:
                    hidden = cfg.mlp_ratio * c
                    mlp = {"norm.gamma": ones_param((c,)), "norm.beta": zeros_param((c,)),
                           "fc1.w": trunc_normal(rng, (c, hidden), std), "fc1.b": zeros_param((hidden,)),
                           "fc2.w": trunc_normal(rng, (hidden, c), std), "fc2.b": zeros_param((c,))}
                blocks.append(BlockParams(ones_param((c,)), zeros_param((c,)), attn, ode, mlp))
        stages.append(StageParams(down, blocks))
    decoder = []
    for s in range(len(widths) - 1, 0, -1):
        c_in, c = widths[s], widths[s - 1]
        decoder.append(DecoderParams(
            _conv_weight(rng, (c_in, c, 2, 2, 2), c_in, cfg), zeros_param((c,)),
            _conv_weight(rng, (c, 2 * c, 3, 3, 3), 27 * 2 * c, cfg), zeros_param((c,)),
            _ode_site(cfg, c, rng) if cfg.decoder_ode_active else None))
    p = cfg.patch_size
    head = {"up.w": _conv_weight(rng, (widths[0], widths[0], p, p, p), widths[0], cfg),
            "up.b": zeros_param((widths[0],)),
            "conv.w": _conv_weight(rng, (cfg.num_classes, widths[0], 1, 1, 1), widths[0], cfg),
            "conv.b": zeros_param((cfg.num_classes,))}
    params = ModelParams(cfg, stem, stages, decoder, head)
    for name, t in params.named().items():
        t.name = name
    return params


# ---------------------------------------------------------------------------
# forward


def tokens_to_volume(tokens: Tensor, grid: tuple) -> Tensor:
    b, _, c = tokens.shape
    return T.permute(T.reshape(tokens, (b,) + tuple(grid) + (c,)), (0, 4, 1, 2, 3))


def volume_to_tokens(vol: Tensor) -> Tensor:
    b, c = vol.shape[:2]
    return T.reshape(T.permute(vol, (0, 2, 3, 4, 1)), (b, -1, c))


def apply_ode_site(h: Tensor, site: OdeSite, cfg: ModelConfig) -> Tensor:
    if site.kind == "nmode":
        return nmode_block(h, site.nmode, cfg.solver)
    return replacement_module(h, site.kind, site.autoencoder)


def transformer_block(x: Tensor, bp: BlockParams, layout: PatchGrid, cfg: ModelConfig,
                      maps: list | None = None) -> Tensor:
    h = T.layer_norm(x, bp.norm_gamma, bp.norm_beta)
    if bp.attention is not None:
        h, m = dual_attention(h, bp.attention, layout)
        if maps is not None:
            maps.append(m)
    if bp.ode is not None:
        h = apply_ode_site(h, bp.ode, cfg)
    x = T.add(x, h) if cfg.residual else h
    if bp.mlp is not None:
        mp = bp.mlp
        z = T.layer_norm(x, mp["norm.gamma"], mp["norm.beta"])
        z = T.relu(T.add(T.matmul(z, mp["fc1.w"]), mp["fc1.b"]))
        z = T.add(T.matmul(z, mp["fc2.w"]), mp["fc2.b"])
        x = T.add(x, z)
    return x


def downsample(x: Tensor, down: dict, groups: int) -> Tensor:
    # one-sided pad so a stride-2 odd kernel halves even extents exactly
    xp = T.pad(x, ((0, 0), (0, 0), (1, 0), (1, 0), (1, 0)))
    y = T.conv3d(xp, down["w"], down["b"], stride=2, pad=0)
    return T.group_norm(y, groups, down["gn.gamma"], down["gn.beta"])


def encoder_forward(x: Tensor, params: ModelParams, cfg: ModelConfig | None = None,
                    maps: list | None = None) -> tuple[list, Tensor]:
    """Stage features as volumes [B, C_s, grid_s] plus the deepest tokens [B, N_4, C_4]."""
    cfg = cfg or params.config
    expected = (cfg.in_channels,) + cfg.input_shape
    if x.ndim != 5 or x.shape[1:] != expected:
        raise DimensionError(f"input {x.shape} does not match [B, {expected}]")
    tokens, grid = embed_patches(x, params.stem)
    features = []
    for s, stage in enumerate(params.stages):
        if stage.down is not None:
            vol = downsample(tokens_to_volume(tokens, grid), stage.down, cfg.groups)
            grid = vol.shape[2:]
            tokens = volume_to_tokens(vol)
        layout = cfg.layout(s)
        for bp in stage.blocks:
            tokens = transformer_block(tokens, bp, layout, cfg, maps)
        features.append(tokens_to_volume(tokens, grid))
    return features, tokens


def decoder_forward(features: list, params: ModelParams, cfg: ModelConfig | None = None) -> Tensor:
    cfg = cfg or params.config
    if len(features) != len(params.stages) or any(f is None for f in features):
        raise UsageError(f"decoder needs {len(params.stages)} encoder features, got {len(features)}")
    d = features[-1]
    for i, dp in enumerate(params.decoder):
        skip = features[len(features) - 2 - i]
        up = T.conv_transpose3d(d, dp.up_w, dp.up_b, stride=2)
        if up.shape[2:] != skip.shape[2:]:
            raise DimensionError(f"upsampled {up.shape} does not match skip {skip.shape}")
        d = T.conv3d(T.concat([up, skip], axis=1), dp.fuse_w, dp.fuse_b, stride=1, pad=1)
        if dp.ode is not None:
            tok = volume_to_tokens(d)
            h = apply_ode_site(tok, dp.ode, cfg)
            tok = T.add(tok, h) if cfg.residual else h
            d = tokens_to_volume(tok, d.shape[2:])
    head = params.head
    d = T.conv_transpose3d(d, head["up.w"], head["up.b"], stride=cfg.patch_size)
    return T.conv3d(d, head["conv.w"], head["conv.b"])


def forward(x: Tensor, params: ModelParams, cfg: ModelConfig | None = None, maps: list | None = None) -> Tensor:
    """Per-voxel class logits [B, num_classes, H, W, D]."""
    features, _ = encoder_forward(x, params, cfg, maps)
    return decoder_forward(features, params, cfg)


def predict_labels(logits: Tensor | np.ndarray) -> np.ndarray:
    """Argmax over classes; softmax is monotone so it is skipped."""
    data = logits.data if isinstance(logits, Tensor) else logits
    return data.argmax(axis=1).astype(np.uint8)


def predict_probabilities(logits: Tensor) -> np.ndarray:
    with T.no_grad():
        return T.softmax(logits, axis=1).data
