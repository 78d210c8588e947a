"""Dense tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient (and recording is enabled) the output keeps references to
its inputs plus a closure mapping the output cotangent to input cotangents.
:func:`backward` orders the reachable records topologically and replays the
closures once each.

Precision defaults to float32; wrap code in ``with precision("f64"):`` for
gradient verification.  ``with checked():`` raises on any non-finite result.
"""
from __future__ import annotations

import io
import json
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, FormatError, CorruptFileError, NonFiniteError, UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}
DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_local = threading.local()


def _flag(name, default):
    return getattr(_local, name, default)


def default_dtype():
    return _flag("dtype", np.float32)


@contextmanager
def precision(name: str):
    if name not in DTYPES:
        raise ConfigurationError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    prev = default_dtype()
    _local.dtype = DTYPES[name]
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def checked(enabled: bool = True):
    prev = _flag("checked", False)
    _local.checked = enabled
    try:
        yield
    finally:
        _local.checked = prev


@contextmanager
def no_grad():
    prev = _flag("grad", True)
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


def grad_enabled() -> bool:
    return _flag("grad", True)


class Tensor:
    """N-dimensional float array with an optional gradient and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        # ascontiguousarray would promote 0-d input to shape (1,)
        self.data = np.array(data, dtype=dtype or default_dtype(), order="C", copy=None)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={DTYPE_NAMES.get(self.dtype, self.dtype)}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, "mean", axes, keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def ones(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad, name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable | None, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if backward_fn is not None and grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if _flag("checked", False) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# tape replay


def build_tape(root: Tensor) -> list[Tensor]:
    """Records reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if root.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=root.dtype)
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(build_tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError("at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def sin(x: Tensor) -> Tensor:
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_UNARY = {"sin": sin, "square": square, "tanh": tanh, "sigmoid": sigmoid, "neg": neg,
          "exp": exp, "log": log, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch a named pointwise operation; ``scale`` takes a float in ``y``."""
    if f in _UNARY:
        return _UNARY[f](x)
    if f in _BINARY:
        return _BINARY[f](x, y)
    if f == "scale":
        return scale(x, y)
    raise ConfigurationError(f"unknown elementwise op {f!r}")


# ---------------------------------------------------------------------------
# linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _binary_operands_matmul(a, b)
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _binary_operands_matmul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    return a, b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, -1)


# ---------------------------------------------------------------------------
# reductions and data movement


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(x: Tensor, op: str, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if op == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)
        factor = None
    elif op == "mean":
        out = x.data.sum(axis=ax, keepdims=keepdims) / x.dtype.type(count)
        factor = x.dtype.type(1.0 / count)
    else:
        raise ConfigurationError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax) if ax else g
        g = np.broadcast_to(g, x.shape)
        return (g * factor if factor is not None else g,)

    return _make(out, (x,), bw, op)


def sum(x: Tensor, axes=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    return reduce(x, "sum", axes, keepdims)


def mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    return reduce(x, "mean", axes, keepdims)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inv),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch on axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                res.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return tuple(res)

    return _make(out, tuple(tensors), bw, "concat")


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise DimensionError(f"pad needs {x.ndim} width pairs, got {len(widths)}")
    out = np.pad(x.data, widths)
    sl = tuple(slice(a, a + s) for (a, _), s in zip(widths, x.shape))
    return _make(out, (x,), lambda g: (g[sl],), "pad")


def window_partition(x: Tensor, window: Sequence[int]) -> Tensor:
    """[B, gx, gy, gz, C] -> [B, windows, wx*wy*wz, C] over disjoint cubic blocks."""
    b, gx, gy, gz, c = x.shape
    wx, wy, wz = window
    if gx % wx or gy % wy or gz % wz:
        raise ConfigurationError(f"window {tuple(window)} does not tile grid {(gx, gy, gz)}")
    t = reshape(x, (b, gx // wx, wx, gy // wy, wy, gz // wz, wz, c))
    t = permute(t, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(t, (b, (gx // wx) * (gy // wy) * (gz // wz), wx * wy * wz, c))


def window_merge(x: Tensor, window: Sequence[int], grid: Sequence[int]) -> Tensor:
    """Inverse of :func:`window_partition`."""
    b, _, _, c = x.shape
    gx, gy, gz = grid
    wx, wy, wz = window
    if gx % wx or gy % wy or gz % wz:
        raise ConfigurationError(f"window {tuple(window)} does not tile grid {tuple(grid)}")
    t = reshape(x, (b, gx // wx, gy // wy, gz // wz, wx, wy, wz, c))
    t = permute(t, (0, 1, 4, 2, 5, 3, 6, 7))
    return reshape(t, (b, gx, gy, gz, c))


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp: np.ndarray, k: int, s: int) -> tuple[np.ndarray, tuple]:
    """[B, C, X, Y, Z] -> columns [B*ox*oy*oz, C*k^3] of every kernel placement."""
    b, c = xp.shape[:2]
    if k == s and all(n % k == 0 for n in xp.shape[2:]):
        ox, oy, oz = (n // k for n in xp.shape[2:])
        v = xp.reshape(b, c, ox, k, oy, k, oz, k).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    else:
        v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
        ox, oy, oz = v.shape[2:5]
        v = v.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return v.reshape(b * ox * oy * oz, c * k ** 3), (ox, oy, oz)


def _col2im(cols: np.ndarray, out_shape: tuple, k: int, s: int, grid: tuple) -> np.ndarray:
    """Scatter-add [B*ox*oy*oz, C*k^3] columns back into a [B, C, X, Y, Z] volume."""
    b, c = out_shape[:2]
    ox, oy, oz = grid
    cols = cols.reshape(b, ox, oy, oz, c, k, k, k)
    if k == s and tuple(out_shape[2:]) == (ox * k, oy * k, oz * k):
        # disjoint placements: pure relayout
        return np.ascontiguousarray(cols.transpose(0, 4, 1, 5, 2, 6, 3, 7)).reshape(out_shape)
    slabs = np.ascontiguousarray(cols.transpose(5, 6, 7, 0, 4, 1, 2, 3))
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[:, :, i:i + s * (ox - 1) + 1:s, j:j + s * (oy - 1) + 1:s, l:l + s * (oz - 1) + 1:s] += slabs[i, j, l]
    return out


def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv extent (n={n} + 2*pad={pad} - k={k}) / stride={stride} is not integral")
    return span // stride + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W,D] with [Cout,Cin,k,k,k] kernels."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv3d shape mismatch: input {x.shape}, kernel {w.shape}")
    cout, k = w.shape[0], w.shape[2]
    if k % 2 == 0 or w.shape[2:] != (k, k, k):
        raise ConfigurationError(f"conv3d needs an odd cubic kernel, got {w.shape[2:]}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    grid = tuple(_conv_extent(n, k, stride, pad) for n in x.shape[2:])
    b = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else x.data
    cols, _ = _im2col(xp, k, stride)
    wm = w.data.reshape(cout, -1)
    om = cols @ wm.T
    if bias is not None:
        om += bias.data
    out = np.ascontiguousarray(om.reshape((b,) + grid + (cout,)).transpose(0, 4, 1, 2, 3))

    def bw(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, xp.shape, k, stride, grid)
            gx = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3], pad:pad + x.shape[4]] if pad else gxp
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of unpadded :func:`conv3d`; kernels are [Cin, Cout, k, k, k]."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose3d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ConfigurationError(f"conv_transpose3d needs a cubic kernel, got {w.shape[2:]}")
    b = x.shape[0]
    grid = x.shape[2:]
    out_shape = (b, cout) + tuple((n - 1) * stride + k for n in grid)
    xm = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, -1)
    out = _col2im(xm @ wm, out_shape, k, stride, grid)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def bw(g):
        gcols, _ = _im2col(g, k, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wm.T).reshape((b,) + grid + (cin,)).transpose(0, 4, 1, 2, 3))
        if w.requires_grad:
            gw = (xm.T @ gcols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw, "conv_transpose3d")


# ---------------------------------------------------------------------------
# normalization


def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of [B, C, ...]."""
    b, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    xr = x.data.reshape(b, groups, -1)
    mu = xr.mean(-1, keepdims=True)
    xc = xr - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    cshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(cshape)).reshape(b, groups, -1)
            gx = _normalize_backward(dxhat, xhat.reshape(b, groups, -1), inv).reshape(x.shape)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "group_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with a per-feature affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gx = _normalize_backward(g * gamma.data, xhat, inv)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                      lr: float, momentum: float) -> None:
    """In place: v <- momentum*v + g ; p <- p - lr*v."""
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError(f"collection lengths differ: {len(params)}/{len(grads)}/{len(velocity)}")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise DimensionError(f"sgd shapes differ: param {p.shape}, grad {np.shape(g)}, velocity {v.shape}")
        v *= v.dtype.type(momentum)
        if g is not None:
            v += g
        p.data -= p.dtype.type(lr) * v


# ---------------------------------------------------------------------------
# serialization


def write_tensor(t, f: BinaryIO) -> None:
    """One-line JSON header then the raw little-endian payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    name = DTYPE_NAMES.get(arr.dtype)
    if name is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = json.dumps({"shape": list(arr.shape), "dtype": name})
    f.write(header.encode() + b"\n")
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(f: BinaryIO) -> Tensor:
    line = f.readline()
    try:
        header = json.loads(line)
        shape, name = tuple(header["shape"]), header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"bad tensor header: {line[:80]!r}") from exc
    if name not in DTYPES:
        raise FormatError(f"unknown dtype {name!r}")
    dt = np.dtype(DTYPES[name]).newbyteorder("<")
    n = int(np.prod(shape)) * dt.itemsize
    payload = f.read(n)
    if len(payload) != n:
        raise CorruptFileError(f"tensor payload has {len(payload)} bytes, header needs {n}")
    arr = np.frombuffer(payload, dtype=dt).astype(DTYPES[name]).reshape(shape)
    return Tensor(arr, dtype=DTYPES[name])


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> Tensor:
    return read_tensor(io.BytesIO(data))


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
