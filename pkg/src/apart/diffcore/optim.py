"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One bias-corrected AdamW update, in place on ``params`` and ``state``.

    Weight decay shrinks the parameter multiplicatively before the moment
    update and is not folded into the gradient.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adamw_step: params, grads and moment buffers differ in length")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == np.shape(g) == m.shape == v.shape):
            raise ShapeError(f"adamw_step: shape mismatch param {p.shape}, grad {np.shape(g)}, "
                             f"moments {m.shape}/{v.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw_step: non-finite gradient for {p.name or p.shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class AdamW:
    """Stateful wrapper pairing a parameter list with its :class:`OptimizerState`."""

    params: List[Tensor]
    lr: float = 0.003
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: OptimizerState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = OptimizerState.for_params(
            self.params, lr=self.lr, beta1=self.betas[0], beta2=self.betas[1],
            eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr)


def cosine_anneal_lr(step: int, total_steps: int, lr_max: float = 0.003) -> float:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_max * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
