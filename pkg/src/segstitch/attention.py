"""Position-weighted patch tokens and shared-query fine/coarse attention.

Both attention branches read the same query projection ``w_q``.  The fine
branch is multi-head softmax attention restricted to disjoint axial windows of
the token grid.  The coarse branch builds a CxC channel-affinity map from the
shared query and keys/values routed through the zero-initialized matrix ``m``,
so at construction time it contributes exactly nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .init import trunc_normal, zeros_param
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Token grid of one stage and the axial window that tiles it."""

    grid: tuple
    window: tuple

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if len(self.grid) != 3 or len(self.window) != 3:
            raise ConfigurationError("grid and window must both be 3-d")
        for axis, (g, w) in enumerate(zip(self.grid, self.window)):
            if w < 1 or g % w:
                raise ConfigurationError(f"window {self.window} does not tile grid {self.grid} on axis {axis}")

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))

    @property
    def window_tokens(self) -> int:
        return int(np.prod(self.window))

    @property
    def n_windows(self) -> int:
        return self.n_tokens // self.window_tokens


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_vf: Tensor
    w_vc: Tensor | None
    m: Tensor
    w_o: Tensor
    heads: int
    window: int
    # populated only by the independent-query comparison variant
    w_qc: Tensor | None = None

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigurationError(f"{c} channels are not divisible by {self.heads} heads")
        for name, t in self.named().items():
            if t.shape != (c, c):
                raise DimensionError(f"{name} has shape {t.shape}, expected {(c, c)}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def share_fine_value(self) -> bool:
        return self.w_vc is None

    def named(self) -> dict:
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_vf": self.w_vf}
        if self.w_vc is not None:
            out["w_vc"] = self.w_vc
        out["m"] = self.m
        out["w_o"] = self.w_o
        if self.w_qc is not None:
            out["w_qc"] = self.w_qc
        return out


@dataclass
class PatchEmbedParams:
    token_wt: Tensor
    w_embed: Tensor
    patch_size: int

    def __post_init__(self):
        d = self.w_embed.shape[0]
        if self.token_wt.shape != (1, d):
            raise DimensionError(f"token_wt has shape {self.token_wt.shape}, expected (1, {d})")

    def named(self) -> dict:
        return {"token_wt": self.token_wt, "w_embed": self.w_embed}


def init_attention(channels: int, heads: int, window: int, rng: np.random.Generator, std: float = 0.02,
                   share_fine_value: bool = False, independent_query: bool = False) -> AttentionParams:
    shape = (channels, channels)
    w_q = trunc_normal(rng, shape, std)
    w_k = trunc_normal(rng, shape, std)
    w_vf = trunc_normal(rng, shape, std)
    w_vc = None if share_fine_value else trunc_normal(rng, shape, std)
    w_o = trunc_normal(rng, shape, std)
    w_qc = trunc_normal(rng, shape, std) if independent_query else None
    return AttentionParams(w_q, w_k, w_vf, w_vc, zeros_param(shape), w_o, heads, window, w_qc)


def init_patch_embed(in_channels: int, patch_size: int, width: int, rng: np.random.Generator,
                     std: float = 0.02) -> PatchEmbedParams:
    d = in_channels * patch_size ** 3
    # Token_wt starts at zero like the other additive offsets
    return PatchEmbedParams(zeros_param((1, d)), trunc_normal(rng, (d, width), std), patch_size)


# ---------------------------------------------------------------------------
# tokens


def position_weight_tokens(tokens_org: Tensor, wt: Tensor) -> Tensor:
    """Add the single learnable row ``wt`` to every flattened patch."""
    if wt.ndim != 2 or wt.shape[0] != 1 or tokens_org.shape[-1] != wt.shape[1]:
        raise DimensionError(f"token length mismatch: tokens {tokens_org.shape}, weights {wt.shape}")
    return T.add(tokens_org, wt)


def patchify(image: Tensor, p: int) -> tuple[Tensor, tuple]:
    """[B, C, H, W, D] -> ([B, N, C*p^3], token grid), one token per disjoint p^3 block."""
    b, c, h, w, d = image.shape
    if h % p or w % p or d % p:
        raise ConfigurationError(f"input extents {(h, w, d)} are not divisible by patch size {p}")
    grid = (h // p, w // p, d // p)
    t = T.reshape(image, (b, c, grid[0], p, grid[1], p, grid[2], p))
    t = T.permute(t, (0, 2, 4, 6, 1, 3, 5, 7))
    return T.reshape(t, (b, int(np.prod(grid)), c * p ** 3)), grid


def embed_patches(image: Tensor, params: PatchEmbedParams) -> tuple[Tensor, tuple]:
    tokens, grid = patchify(image, params.patch_size)
    return T.matmul(position_weight_tokens(tokens, params.token_wt), params.w_embed), grid


# ---------------------------------------------------------------------------
# attention branches


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.shape[:-2]
    w, c = x.shape[-2:]
    t = T.reshape(x, lead + (w, heads, c // heads))
    n = len(lead)
    return T.permute(t, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    heads, w, dh = x.shape[-3:]
    n = len(lead)
    t = T.permute(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(t, lead + (w, heads * dh))


def _transpose_last(x: Tensor) -> Tensor:
    n = x.ndim
    return T.permute(x, tuple(range(n - 2)) + (n - 1, n - 2))


def fine_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head attention over the second-to-last axis of [..., w, C] projections."""
    dh = q.shape[-1] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = T.scale(T.matmul(qh, _transpose_last(kh)), 1.0 / math.sqrt(dh))
    weights = T.softmax_lastdim(scores)
    return _merge_heads(T.matmul(weights, vh)), weights


def coarse_core(q: Tensor, k: Tensor, vc: Tensor, m: Tensor) -> tuple[Tensor, Tensor]:
    """Channel-affinity attention: (vc m) softmax(q^T (k m) / sqrt(C))."""
    c = q.shape[-1]
    k_r = T.matmul(k, m)
    v_rc = T.matmul(vc, m)
    weights = T.softmax_lastdim(T.scale(T.matmul(_transpose_last(q), k_r), 1.0 / math.sqrt(c)))
    return T.matmul(v_rc, weights), weights


def fine_attention(x_window: Tensor, params: AttentionParams) -> Tensor:
    """Attention inside one window (or a stack of windows) of shape [..., w, C]."""
    if x_window.shape[-2] != params.window:
        raise ConfigurationError(f"window holds {x_window.shape[-2]} tokens, params expect {params.window}")
    q = T.matmul(x_window, params.w_q)
    k = T.matmul(x_window, params.w_k)
    v = T.matmul(x_window, params.w_vf)
    return fine_core(q, k, v, params.heads)[0]


def coarse_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """Global branch over all tokens [..., N, C] of a stage."""
    if x.shape[-1] != params.channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    q = T.matmul(x, params.w_qc if params.w_qc is not None else params.w_q)
    k = T.matmul(x, params.w_k)
    vc = T.matmul(x, params.w_vf if params.share_fine_value else params.w_vc)
    return coarse_core(q, k, vc, params.m)[0]


@dataclass
class AttentionMaps:
    fine: np.ndarray  # [B, windows, heads, w, w]
    coarse: np.ndarray  # [B, C, C]
    layout: PatchGrid


def dual_attention(x: Tensor, params: AttentionParams, layout: PatchGrid) -> tuple[Tensor, AttentionMaps]:
    """Fused (Attn_f + Attn_c) W_O for tokens [B, N, C] (or [N, C]) laid out on ``layout``."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, n, c = x.shape
    if n != layout.n_tokens:
        raise ConfigurationError(f"{n} tokens do not match grid {layout.grid}")
    if layout.window_tokens != params.window:
        raise ConfigurationError(f"layout window {layout.window} holds {layout.window_tokens} tokens, "
                                 f"params expect {params.window}")
    q = T.matmul(x, params.w_q)
    k = T.matmul(x, params.w_k)
    vf = T.matmul(x, params.w_vf)
    vc = vf if params.share_fine_value else T.matmul(x, params.w_vc)

    def to_windows(t):
        return T.window_partition(T.reshape(t, (b,) + layout.grid + (c,)), layout.window)

    fine_w, fine_maps = fine_core(to_windows(q), to_windows(k), to_windows(vf), params.heads)
    attn_f = T.reshape(T.window_merge(fine_w, layout.window, layout.grid), (b, n, c))

    q_c = q if params.w_qc is None else T.matmul(x, params.w_qc)
    attn_c, coarse_maps = coarse_core(q_c, k, vc, params.m)

    fused = T.matmul(T.add(attn_f, attn_c), params.w_o)
    if squeeze:
        fused = T.reshape(fused, (n, c))
    return fused, AttentionMaps(fine_maps.data, coarse_maps.data, layout)


# ---------------------------------------------------------------------------
# counting


def attention_param_count(params: AttentionParams) -> int:
    return int(sum(t.size for t in params.named().values()))


def fine_attention_maccs(n_tokens: int, channels: int, window: int) -> int:
    """Score and weighted-value products of windowed attention (projections excluded)."""
    if n_tokens % window:
        raise ConfigurationError(f"window {window} does not divide {n_tokens} tokens")
    return 2 * n_tokens * window * channels


def dense_attention_maccs(n_tokens: int, channels: int) -> int:
    """Same products for attention over all token pairs."""
    return 2 * n_tokens * n_tokens * channels


def coarse_attention_maccs(n_tokens: int, channels: int) -> int:
    """K M, V M, Q^T K_R and V_RC S."""
    return 4 * n_tokens * channels * channels


def dual_attention_maccs(n_tokens: int, channels: int, window: int, share_fine_value: bool = False,
                         independent_query: bool = False) -> int:
    # Q, K, V_fine, W_O, plus the optional separate coarse value and query
    projections = 4 + (0 if share_fine_value else 1) + (1 if independent_query else 0)
    return projections * n_tokens * channels * channels \
        + fine_attention_maccs(n_tokens, channels, window) + coarse_attention_maccs(n_tokens, channels)
