"""Deterministic parameter initializers."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, name: str | None = None) -> Tensor:
    """Normal(0, std) redrawn outside +-2 std; consumes the generator deterministically."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return Tensor(z * std, requires_grad=True, name=name, dtype=default_dtype())


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name, dtype=default_dtype())


def ones_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name, dtype=default_dtype())
