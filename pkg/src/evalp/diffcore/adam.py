"""Adam optimizer with bias correction.

``adam_step`` is the pure functional update on raw arrays; ``Adam`` wraps
it for lists of parameter tensors in a training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeMismatchError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter."""

    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            t=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState):
    """One Adam update; returns (new_params, state) with state.t advanced.

    Deterministic given (params, grads, state). Rejects non-finite
    gradients and shape mismatches.
    """
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} params vs {len(grads)} grads")
    new_params = []
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"param {i}: shape {p.shape} vs grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for param {i}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params, state


class Adam:
    """Stateful wrapper updating parameter tensors in place."""

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.init([p.data for p in self.params], lr, beta1, beta2, eps)

    def step(self):
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        new_data, _ = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new_data):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None
