"""Embedding lookup, GRU cell, masked bidirectional GRU and two-layer MLP."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .numerics import Tensor, concat, gather_rows, sigmoid, tanh
from .numerics.tensor import stack


def _uniform(rng: np.random.Generator, shape, scale: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class _ParamGroup:
    """Dataclass mixin: ``named()`` yields ``prefix.field -> Tensor``."""

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name)
                for f in fields(self) if isinstance(getattr(self, f.name), Tensor)}


@dataclass
class EmbeddingTable(_ParamGroup):
    weight: Tensor
    pad_id: int = 0
    trainable: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, dim: int, pad_id: int = 0, scale: float = 0.1):
        w = rng.normal(0.0, scale, size=(vocab_size, dim))
        w[pad_id] = 0.0
        return cls(Tensor(w, requires_grad=True, name="embedding"), pad_id)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]


def embed(ids, table: EmbeddingTable) -> Tensor:
    """Rows of the table for ``ids`` (any integer array shape)."""
    return gather_rows(table.weight, ids, frozen_row=table.pad_id)


@dataclass
class GRUCellParams(_ParamGroup):
    W_c: Tensor
    U_c: Tensor
    b_c: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "GRUCellParams":
        s = 1.0 / np.sqrt(hidden_dim)
        kw = {}
        for gate in ("_c", "_r", ""):
            kw["W" + gate] = _uniform(rng, (hidden_dim, input_dim), s, "W" + gate)
            kw["U" + gate] = _uniform(rng, (hidden_dim, hidden_dim), s, "U" + gate)
            kw["b" + gate] = _zeros(hidden_dim, "b" + gate)
        return cls(**kw)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GRUCellParams":
        kw = {}
        for gate in ("_c", "_r", ""):
            kw["W" + gate] = _zeros((hidden_dim, input_dim), "W" + gate)
            kw["U" + gate] = _zeros((hidden_dim, hidden_dim), "U" + gate)
            kw["b" + gate] = _zeros(hidden_dim, "b" + gate)
        return cls(**kw)


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GRUCellParams) -> Tensor:
    """One GRU step on ``[d]`` or ``[B, d]`` inputs.

    Interpolation is ``(1 - c) * h_prev + c * h_cand`` with ``c`` the update gate.
    """
    single = x_t.ndim == 1
    if single:
        x_t, h_prev = x_t.reshape(1, -1), h_prev.reshape(1, -1)
    if x_t.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden_dim:
        raise ValueError(f"gru_cell: got x {x_t.shape}, h {h_prev.shape} for "
                         f"input_dim={p.input_dim}, hidden_dim={p.hidden_dim}")
    c = sigmoid(x_t @ p.W_c.T + h_prev @ p.U_c.T + p.b_c)
    r = sigmoid(x_t @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    cand = tanh(x_t @ p.W.T + (r * h_prev) @ p.U.T + p.b)
    h = (1.0 - c) * h_prev + c * cand
    return h.reshape(-1) if single else h


def _masked(h_new: Tensor, h_old: Tensor, keep: np.ndarray) -> Tensor:
    # keep: [B, 1] of 0/1
    return h_new * keep + h_old * (1.0 - keep)


def bigru_run(inputs: Sequence[Tensor], lengths, fwd: GRUCellParams, bwd: GRUCellParams):
    """Masked Bi-GRU over a batch given as per-step ``[B, d]`` tensors.

    Returns ``(states, final)``: ``states`` is a list of ``[B, 2H]`` per step,
    zero beyond each row's length; ``final`` is ``[fwd h_len ; bwd h_1]``.
    The backward direction reads each row's unpadded span in reverse.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths <= 0):
        raise ValueError("every sequence needs length >= 1")
    T = len(inputs)
    if np.any(lengths > T):
        raise ValueError("length exceeds number of steps")
    B = lengths.shape[0]
    steps = np.arange(T)[:, None]
    keep = (steps < lengths[None, :]).astype(np.float64)[:, :, None]  # [T, B, 1]

    h = Tensor(np.zeros((B, fwd.hidden_dim)))
    fwd_states = []
    for t in range(T):
        h = _masked(gru_cell(inputs[t], h, fwd), h, keep[t])
        fwd_states.append(h * keep[t])
    h_fwd_final = h

    h = Tensor(np.zeros((B, bwd.hidden_dim)))
    bwd_states = [None] * T
    for t in reversed(range(T)):
        # rows with t >= len stay at the zero initial state
        h = _masked(gru_cell(inputs[t], h, bwd), h, keep[t])
        bwd_states[t] = h
    h_bwd_final = h

    states = [concat([f, b], axis=-1) for f, b in zip(fwd_states, bwd_states)]
    return states, concat([h_fwd_final, h_bwd_final], axis=-1)


def bigru_encode(seq: Tensor, length: int, fwd: GRUCellParams, bwd: GRUCellParams):
    """Single-sequence form: ``seq`` is ``[T, d]``; returns ``([T, 2H], [2H])``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    inputs = [seq[t:t + 1] for t in range(seq.shape[0])]
    states, final = bigru_run(inputs, [length], fwd, bwd)
    return stack(states, axis=0).reshape(seq.shape[0], -1), final.reshape(-1)


def masked_mean(states: Sequence[Tensor], lengths) -> Tensor:
    """Mean of per-step ``[B, F]`` states over each row's valid steps.

    Assumes states are already zero beyond each row's length.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    total = states[0]
    for s in states[1:]:
        total = total + s
    return total * (1.0 / lengths)[:, None]


@dataclass
class MlpParams(_ParamGroup):
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> "MlpParams":
        return cls(
            _uniform(rng, (hidden, in_dim), 1.0 / np.sqrt(in_dim), "W1"),
            _zeros(hidden, "b1"),
            _uniform(rng, (out_dim, hidden), 1.0 / np.sqrt(hidden), "W2"),
            _zeros(out_dim, "b2"),
        )

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, out_dim: int) -> "MlpParams":
        return cls(_zeros((hidden, in_dim), "W1"), _zeros(hidden, "b1"),
                   _zeros((out_dim, hidden), "W2"), _zeros(out_dim, "b2"))

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]


def mlp2(x: Tensor, p: MlpParams) -> Tensor:
    """``W2 tanh(W1 x + b1) + b2`` on ``[..., in]`` (1-D or 2-D)."""
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"mlp2: input width {x.shape[-1]} != {p.in_dim}")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    out = tanh(x @ p.W1.T + p.b1) @ p.W2.T + p.b2
    return out.reshape(-1) if single else out
