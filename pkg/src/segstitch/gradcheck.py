"""Central finite-difference verification of every differentiable operation.

Errors are normwise per input: ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, FLOOR)`` so entries with tiny gradients do not dominate the
metric and exactly-zero gradients are not judged against roundoff noise.
All checks run in float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import attention as A
from . import nmode as N
from . import tensor as T
from .losses import soft_dice_loss
from .tensor import Tensor

STEP = 1e-3
TOLERANCE = 1e-4
FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = STEP,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst normwise error over ``inputs`` that require a gradient.

    ``fn`` must map the inputs to a scalar tensor.  With ``max_entries`` only a
    random subset of each input's entries is probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    fn(*inputs).backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        with T.no_grad():
            for n, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = fn(*inputs).item()
                flat[i] = old - h
                fm = fn(*inputs).item()
                flat[i] = old
                numeric[n] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


def check_directional(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = STEP,
                      rng: np.random.Generator | None = None, aligned: bool = True) -> float:
    """Compare <grad, v> with a central difference along a random unit direction v.

    With ``aligned`` each entry of v gets a random magnitude but the sign of the
    analytic gradient, so <grad, v> cannot cancel to roundoff level; a wrong
    sign or magnitude in any entry still shows up in the comparison.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    fn().backward()
    dirs = [rng.standard_normal(p.shape) for p in params]
    if aligned:
        dirs = [np.abs(d) * np.where(p.grad < 0, -1.0, 1.0) if p.grad is not None else d
                for d, p in zip(dirs, params)]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)
    base = [p.data.copy() for p in params]
    with T.no_grad():
        for p, b0, d in zip(params, base, dirs):
            p.data[...] = b0 + h * d
        fp = fn().item()
        for p, b0, d in zip(params, base, dirs):
            p.data[...] = b0 - h * d
        fm = fn().item()
        for p, b0 in zip(params, base):
            p.data[...] = b0
    numeric = (fp - fm) / (2 * h)
    return relative_error(np.array([analytic]), np.array([numeric]))


def _rand(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection so every output entry matters
    return T.sum(T.mul(out, w))


def _op_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function, inputs)."""
    cases = {}

    def add_case(name, f, *inputs):
        out_shape = f(*inputs).shape
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda *xs: _weighted(f(*xs), w), list(inputs))

    add_case("add", T.add, _rand(rng, 3, 4), _rand(rng, 4))
    add_case("sub", T.sub, _rand(rng, 2, 3, 4), _rand(rng, 3, 1))
    add_case("mul", T.mul, _rand(rng, 3, 4), _rand(rng, 1, 4))
    add_case("div", T.div, _rand(rng, 3, 4), _rand(rng, 3, 4, low=0.5))
    add_case("scale", lambda x: T.scale(x, -1.7), _rand(rng, 5))
    add_case("neg", T.neg, _rand(rng, 4))
    add_case("sin", T.sin, _rand(rng, 3, 3))
    add_case("square", T.square, _rand(rng, 3, 3))
    add_case("tanh", T.tanh, _rand(rng, 3, 3))
    add_case("sigmoid", T.sigmoid, _rand(rng, 3, 3))
    add_case("exp", T.exp, _rand(rng, 3, 3))
    add_case("log", T.log, _rand(rng, 3, 3, low=0.5))
    relu_in = rng.standard_normal((4, 4))
    relu_in[np.abs(relu_in) < 0.1] += 0.3
    add_case("relu", T.relu, Tensor(relu_in, requires_grad=True))
    add_case("matmul", T.matmul, _rand(rng, 3, 4), _rand(rng, 4, 2))
    add_case("matmul_batched", T.matmul, _rand(rng, 2, 3, 4), _rand(rng, 4, 5))
    add_case("softmax", T.softmax_lastdim, _rand(rng, 3, 5))
    add_case("softmax_axis1", lambda x: T.softmax(x, axis=1), _rand(rng, 2, 3, 4))
    add_case("sum", lambda x: T.sum(x, (0, 2)), _rand(rng, 2, 3, 4))
    add_case("mean", lambda x: T.mean(x, 1, keepdims=True), _rand(rng, 2, 3, 4))
    add_case("reshape", lambda x: T.reshape(x, (4, 6)), _rand(rng, 2, 3, 4))
    add_case("permute", lambda x: T.permute(x, (2, 0, 1)), _rand(rng, 2, 3, 4))
    add_case("getitem", lambda x: T.getitem(x, (slice(None), 1)), _rand(rng, 3, 4))
    add_case("concat", lambda a, b: T.concat([a, b], axis=1), _rand(rng, 2, 3), _rand(rng, 2, 5))
    add_case("pad", lambda x: T.pad(x, ((1, 0), (0, 2))), _rand(rng, 2, 3))
    add_case("window_partition", lambda x: T.window_partition(x, (2, 1, 2)), _rand(rng, 1, 4, 2, 2, 3))
    add_case("window_merge", lambda x: T.window_merge(x, (2, 1, 2), (4, 2, 2)), _rand(rng, 1, 4, 4, 3))
    add_case("conv3d", lambda x, w, b: T.conv3d(x, w, b, stride=1, pad=1),
             _rand(rng, 1, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3))
    add_case("conv3d_stride2", lambda x, w, b: T.conv3d(x, w, b, stride=2, pad=0),
             _rand(rng, 2, 2, 5, 5, 5), _rand(rng, 2, 2, 3, 3, 3), _rand(rng, 2))
    add_case("conv_transpose3d", lambda x, w, b: T.conv_transpose3d(x, w, b, stride=2),
             _rand(rng, 1, 3, 2, 2, 2), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 2))
    add_case("conv_transpose3d_k2", lambda x, w, b: T.conv_transpose3d(x, w, b, stride=2),
             _rand(rng, 2, 2, 2, 3, 2), _rand(rng, 2, 3, 2, 2, 2), _rand(rng, 3))
    add_case("group_norm", lambda x, g, b: T.group_norm(x, 2, g, b),
             _rand(rng, 2, 4, 3, 2, 2), _rand(rng, 4), _rand(rng, 4))
    add_case("layer_norm", T.layer_norm, _rand(rng, 5, 4), _rand(rng, 4), _rand(rng, 4))

    add_case("position_weight_tokens", A.position_weight_tokens, _rand(rng, 6, 8), _rand(rng, 1, 8))
    c = 4
    ap = A.init_attention(c, 2, 4, rng, std=0.5)
    ap.m.data[...] = rng.standard_normal((c, c)) * 0.5
    attn_params = list(ap.named().values())

    add_case("fine_attention", lambda x, *ps: A.fine_attention(x, ap), _rand(rng, 3, 4, c), *attn_params)
    add_case("coarse_attention", lambda x, *ps: A.coarse_attention(x, ap), _rand(rng, 6, c), *attn_params)
    layout = A.PatchGrid((2, 2, 2), (2, 1, 2))
    add_case("dual_attention", lambda x, *ps: A.dual_attention(x, ap, layout)[0], _rand(rng, 2, 8, c),
             *attn_params)

    npar = N.init_nmode(c, rng)
    npar.b.data[...] = rng.standard_normal(c) * 0.3
    for variant in N.NONLINEARITIES:
        vp = N.NmOdeParams(npar.w1, npar.b, variant)
        add_case(f"nmode_derivative_{variant}", lambda y, x, w1, b, vp=vp: N.nmode_derivative(y, x, vp),
                 _rand(rng, 5, c), _rand(rng, 5, c), npar.w1, npar.b)
    for method in N.METHODS:
        cfg = N.SolverConfig(method, 1.0, 4)
        add_case(f"integrate_{method}", lambda x, w1, b, cfg=cfg: N.integrate(x, npar, cfg),
                 _rand(rng, 2, 5, c), npar.w1, npar.b)
    add_case("nmode_block", lambda x, w1, b: N.nmode_block(x, npar, N.SolverConfig()),
             _rand(rng, 6, c), npar.w1, npar.b)
    add_case("replacement_sigmoid", lambda x: N.replacement_module(x, "sigmoid"), _rand(rng, 4, c))
    ae = N.init_autoencoder(c, rng, std=0.5)
    ae.b_down.data[...] = rng.standard_normal(ae.b_down.shape) * 0.3
    add_case("replacement_autoencoder", lambda x, *ps: N.replacement_module(x, "autoencoder", ae),
             _rand(rng, 4, c), *ae.named().values())

    labels = rng.integers(0, 3, size=(2, 3, 2, 2))
    cases["soft_dice_loss"] = (lambda z: soft_dice_loss(z, labels), [_rand(rng, 2, 3, 3, 2, 2)])
    return cases


def tiny_gradcheck_config():
    from .model import ModelConfig

    return ModelConfig(in_channels=1, num_classes=2, input_shape=(32, 32, 32), patch_size=2,
                       stage_widths=(8, 16, 32, 64), heads=(1, 2, 2, 4), window=8, blocks_per_stage=1,
                       solver=N.SolverConfig("euler", 1.0, 2), init_std=0.1, conv_init_std=0.1)


def model_gradcheck(seed: int = 0, cfg=None, entries_per_tensor: int = 4, m_scale: float = 0.05) -> float:
    """-softDice through the whole network: one directional check over all
    parameters, then central differences on a few sampled entries of every tensor.

    The entrywise error is normwise over all sampled entries together: a few
    tensors carry gradients near 1e-6, where h=1e-3 truncation alone reaches
    1e-4 of their own scale, while the network-wide gradient scale is ~1e-4.

    M and Token_wt start at zero, which would leave the coarse branch and the
    position weights untested, so they get small random values first.
    """
    from .model import build_model, forward

    cfg = cfg or tiny_gradcheck_config()
    rng = np.random.default_rng(seed)
    params = build_model(cfg, seed)
    for name, t in params.named().items():
        if name.endswith(".m") or name.endswith("token_wt"):
            t.data[...] = rng.standard_normal(t.shape) * m_scale
    x = Tensor(rng.standard_normal((1, cfg.in_channels) + cfg.input_shape))
    labels = rng.integers(0, cfg.num_classes, size=(1,) + cfg.input_shape)

    def loss():
        return soft_dice_loss(forward(x, params), labels)

    worst = check_directional(loss, params.parameters(), rng=rng)
    params.zero_grad()
    loss().backward()
    h = STEP
    analytic, numeric_all = [], []
    with T.no_grad():
        for t in params.parameters():
            flat = t.data.reshape(-1)
            grad = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
            idx = rng.choice(flat.size, min(entries_per_tensor, flat.size), replace=False)
            numeric = np.empty(len(idx))
            for n, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = loss().item()
                flat[i] = old - h
                fm = loss().item()
                flat[i] = old
                numeric[n] = (fp - fm) / (2 * h)
            analytic.append(grad[idx])
            numeric_all.append(numeric)
    return max(worst, relative_error(np.concatenate(analytic), np.concatenate(numeric_all)))


def run_suite(seed: int = 0, include_model: bool = True) -> list[GradCheckResult]:
    results = []
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _op_cases(rng).items():
            t0 = time.perf_counter()
            err = check_gradients(fn, inputs, rng=rng)
            results.append(GradCheckResult(name, err, time.perf_counter() - t0))
        if include_model:
            t0 = time.perf_counter()
            err = model_gradcheck(seed)
            results.append(GradCheckResult("segstitch_model", err, time.perf_counter() - t0))
    return results


def format_results(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  {'rel.error':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:10.2e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
