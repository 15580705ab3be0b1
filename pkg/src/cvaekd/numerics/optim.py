from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """A loss or gradient contained NaN or inf."""


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        elif len(self.m) != len(params):
            raise ValueError(f"optimizer state tracks {len(self.m)} parameters, got {len(params)}")


def global_norm(grads: Sequence[np.ndarray]) -> float:
    """L2 norm over all gradients, scaled so that huge entries do not overflow."""
    peak = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.sqrt(sum(float(np.sum((g / peak) ** 2)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Nothing is modified if any gradient is non-finite, any parameter frozen, or
    the update itself would overflow.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.frozen:
            raise FrozenParameterError(f"parameter {p.name or p.shape} is frozen")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name or p.shape}")
    state.ensure(params)
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_p = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m2 = state.beta1 * m + (1.0 - state.beta1) * g
            v2 = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            p2 = p.data - state.lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + state.eps)
            if not (np.all(np.isfinite(v2)) and np.all(np.isfinite(p2))):
                raise NonFiniteError(f"Adam update overflows for {p.name or p.shape}")
            new_m.append(m2)
            new_v.append(v2)
            new_p.append(p2)
    for p, p2, m, m2, v, v2 in zip(params, new_p, state.m, new_m, state.v, new_v):
        m[...] = m2
        v[...] = v2
        p.data[...] = p2
    state.t = t
