"""Neural-memory ODE block and its ablation stand-ins.

The memory state y starts at zero and follows dy/dt = -y + g(y + x W1^T + b),
where the feature map x is held fixed as external input and g is sin^2 (or
sin / tanh for the variants).  Integration is fixed-step explicit Euler or RK4,
unrolled on the tape so gradients reach W1, b and x directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .init import trunc_normal, zeros_param
from .tensor import Tensor


def _sin2(z: Tensor) -> Tensor:
    return T.square(T.sin(z))


NONLINEARITIES = {"sin2": _sin2, "sin": T.sin, "tanh": T.tanh}
METHODS = ("euler", "rk4")
REPLACEMENTS = ("sigmoid", "autoencoder")


@dataclass
class NmOdeParams:
    w1: Tensor
    b: Tensor
    variant: str = "sin2"

    def __post_init__(self):
        if self.variant not in NONLINEARITIES:
            raise ConfigurationError(f"unknown nmODE variant {self.variant!r}; expected one of {sorted(NONLINEARITIES)}")
        c = self.w1.shape[0]
        if self.w1.shape != (c, c) or self.b.shape != (c,):
            raise DimensionError(f"nmODE weights {self.w1.shape}/{self.b.shape} are not (C, C)/(C,)")

    def named(self) -> dict:
        return {"w1": self.w1, "b": self.b}


@dataclass
class SolverConfig:
    method: str = "euler"
    horizon: float = 1.0
    steps: int = 8

    def __post_init__(self):
        self.validate()

    @property
    def step_size(self) -> float:
        return self.horizon / self.steps

    def validate(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown solver {self.method!r}; expected one of {METHODS}")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ConfigurationError(f"solver needs steps >= 1, got {self.steps!r}")
        if not self.horizon > 0:
            raise ConfigurationError(f"solver horizon must be positive, got {self.horizon}")
        if self.method == "euler" and self.step_size > 1.0:
            raise ConfigurationError(f"euler step {self.step_size} > 1 breaks the [0, 1] state bound")


@dataclass
class AutoencoderParams:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    def named(self) -> dict:
        return {"w_down": self.w_down, "b_down": self.b_down, "w_up": self.w_up, "b_up": self.b_up}


def init_nmode(channels: int, rng: np.random.Generator, variant: str = "sin2", std: float | None = None) -> NmOdeParams:
    # unit-variance drive keeps g away from its flat zero at start
    std = 1.0 / math.sqrt(channels) if std is None else std
    return NmOdeParams(trunc_normal(rng, (channels, channels), std), zeros_param((channels,)), variant)


def init_autoencoder(channels: int, rng: np.random.Generator, bottleneck: int | None = None,
                     std: float = 0.02) -> AutoencoderParams:
    cb = channels // 2 if bottleneck is None else bottleneck
    if not isinstance(cb, (int, np.integer)) or cb < 1:
        raise ConfigurationError(f"autoencoder bottleneck must be a positive integer, got {cb!r}")
    return AutoencoderParams(trunc_normal(rng, (channels, cb), std), zeros_param((cb,)),
                             trunc_normal(rng, (cb, channels), std), zeros_param((channels,)))


def _drive(x: Tensor, params: NmOdeParams) -> Tensor:
    if x.shape[-1] != params.w1.shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} channels, W1 expects {params.w1.shape[1]}")
    return T.add(T.matmul(x, T.permute(params.w1, (1, 0))), params.b)


def _rhs(y: Tensor, drive: Tensor, g) -> Tensor:
    return T.sub(g(T.add(y, drive)), y)


def nmode_derivative(y: Tensor, x: Tensor, params: NmOdeParams) -> Tensor:
    if y.shape != x.shape:
        raise DimensionError(f"state {y.shape} and input {x.shape} differ")
    return _rhs(y, _drive(x, params), NONLINEARITIES[params.variant])


def integrate(x: Tensor, params: NmOdeParams, cfg: SolverConfig, trajectory: list | None = None) -> Tensor:
    """y(T) from y(0) = 0; intermediate states are appended to ``trajectory`` when given."""
    cfg.validate()
    g = NONLINEARITIES[params.variant]
    drive = _drive(x, params)
    h = cfg.step_size
    y = Tensor(np.zeros(x.shape, dtype=x.dtype), dtype=x.dtype)
    for _ in range(cfg.steps):
        if cfg.method == "euler":
            y = T.add(y, T.scale(_rhs(y, drive, g), h))
        else:
            k1 = _rhs(y, drive, g)
            k2 = _rhs(T.add(y, T.scale(k1, h / 2)), drive, g)
            k3 = _rhs(T.add(y, T.scale(k2, h / 2)), drive, g)
            k4 = _rhs(T.add(y, T.scale(k3, h)), drive, g)
            incr = T.add(T.add(k1, T.scale(T.add(k2, k3), 2.0)), k4)
            y = T.add(y, T.scale(incr, h / 6))
        if trajectory is not None:
            trajectory.append(y.data)
    return y


def nmode_block(fused: Tensor, params: NmOdeParams, cfg: SolverConfig) -> Tensor:
    """The feature map enters as the constant external input of the ODE."""
    return integrate(fused, params, cfg)


def replacement_module(fused: Tensor, kind: str, params: AutoencoderParams | None = None) -> Tensor:
    if kind == "sigmoid":
        return T.sigmoid(fused)
    if kind == "autoencoder":
        if params is None:
            raise ConfigurationError("autoencoder replacement needs AutoencoderParams")
        hidden = T.tanh(T.add(T.matmul(fused, params.w_down), params.b_down))
        return T.add(T.matmul(hidden, params.w_up), params.b_up)
    raise ConfigurationError(f"unknown replacement {kind!r}; expected one of {REPLACEMENTS}")


def nmode_param_count(channels: int) -> int:
    return channels * channels + channels


def autoencoder_param_count(channels: int, bottleneck: int) -> int:
    return 2 * channels * bottleneck + bottleneck + channels


def nmode_maccs(n_tokens: int, channels: int, cfg: SolverConfig) -> int:
    """Drive projection once, then one fused update per element per stage evaluation."""
    per_step = n_tokens * channels * (1 if cfg.method == "euler" else 8)
    return n_tokens * channels * channels + cfg.steps * per_step
