from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps coordinates whose true gradient is ~0 from being judged on
    round-off alone.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current values of ``params``
    and be deterministic (any noise frozen).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(f, p, h)
        if p.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
