from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_diff_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``fn`` builds a scalar from ``params``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    backward(fn(params))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn(params).item()
            flat[idx] = orig - h
            down = fn(params).item()
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite value probing param {k} coordinate {idx}")
            numeric = (up - down) / (2 * h)
            a = analytic[k].reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
