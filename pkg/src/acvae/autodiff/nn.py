"""Stateful pieces around the ops: batch-norm state, Adam, Glorot init, RNG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ops import glorot_bound
from .tensor import Tensor


def make_rng(seed) -> np.random.Generator:
    """The single seedable generator type used everywhere (PCG64).

    ``seed`` may be an int or a sequence of ints; sequences derive independent
    substreams, e.g. ``make_rng([seed, anchor])`` for per-volume scoring.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> Tensor:
    bound = glorot_bound(shape)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype), requires_grad=True)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    decay: float = 0.9
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"batch-norm decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def create(cls, channels: int, decay: float = 0.9, epsilon: float = 1e-3, dtype=np.float64):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            decay=decay,
            epsilon=epsilon,
        )

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        d = self.decay
        self.running_mean = (d * self.running_mean + (1.0 - d) * batch_mean).astype(self.running_mean.dtype)
        self.running_var = (d * self.running_var + (1.0 - d) * batch_var).astype(self.running_var.dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state was built for a different parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
