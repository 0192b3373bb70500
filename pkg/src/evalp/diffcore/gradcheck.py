"""Gradient verification against central finite differences."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, clear_tape, no_grad


def gradcheck(fn, points, h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and numeric gradients.

    ``fn`` maps the given tensors to a scalar tensor; ``points`` is one
    tensor or a sequence of tensors, each checked elementwise. Relative
    error is |analytic - numeric| / max(1, |analytic|, |numeric|). Callers
    must keep check points away from kinks of non-smooth ops.
    """
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for p in points:
        p.requires_grad = True
        p.grad = None

    clear_tape()
    out = fn(*points)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

    worst = 0.0
    with no_grad():
        for k, p in enumerate(points):
            # Perturb through a flat copy; reshape of a 0-d array is a copy,
            # so in-place bumps of p.data.reshape(-1) would be lost.
            base = p.data
            for i in range(base.size):
                for sign in (+1.0, -1.0):
                    flat = base.reshape(-1).copy()
                    flat[i] += sign * h
                    p.data = flat.reshape(base.shape)
                    if sign > 0:
                        f_plus = fn(*points).item()
                    else:
                        f_minus = fn(*points).item()
                p.data = base
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[k].reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst
