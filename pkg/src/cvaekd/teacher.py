"""Frozen bidirectional GRU language model used as the distillation teacher.

The forward LM models ``p(y_k | y_<k)`` and the backward LM ``p(y_k | y_>k)``.
Concatenated hidden states give contextual token embeddings; the forward LM's
tempered next-token distribution gives soft targets.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import NewsReportPair, Vocabulary, batch_iter
from .layers import EmbeddingTable, GRUCellParams, embed, gru_cell
from .numerics import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_step,
    backward,
    clip_by_global_norm,
    log_softmax,
)
from .numerics.checkpoint import decode_params, encode_params, read_json, write_json
from .numerics.tensor import _softmax_np

log = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    emb_dim: int = 64
    hidden: int = 128
    epochs: int = 20
    lr: float = 0.005
    batch_size: int = 16
    max_len: int = 200
    temperature: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class _DirectionalLM:
    embedding: EmbeddingTable
    cell: GRUCellParams
    W_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, rng, vocab_size: int, emb_dim: int, hidden: int, pad_id: int):
        s = 1.0 / np.sqrt(hidden)
        return cls(
            EmbeddingTable.init(rng, vocab_size, emb_dim, pad_id),
            GRUCellParams.init(rng, emb_dim, hidden),
            Tensor(rng.uniform(-s, s, size=(vocab_size, hidden)), requires_grad=True, name="W_out"),
            Tensor(np.zeros(vocab_size), requires_grad=True, name="b_out"),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.embedding.named(prefix + ".embedding")
        out.update(self.cell.named(prefix + ".cell"))
        out[prefix + ".W_out"] = self.W_out
        out[prefix + ".b_out"] = self.b_out
        return out

    def run(self, ids: np.ndarray) -> list[Tensor]:
        """Hidden state after each input step for an ``[B, T]`` id array."""
        B, T = ids.shape
        h = Tensor(np.zeros((B, self.cell.hidden_dim)))
        states = []
        for t in range(T):
            h = gru_cell(embed(ids[:, t], self.embedding), h, self.cell)
            states.append(h)
        return states

    def logits(self, h: Tensor) -> Tensor:
        return h @ self.W_out.T + self.b_out


@dataclass
class TeacherLM:
    forward: _DirectionalLM
    backward: _DirectionalLM
    vocab_size: int
    pad_id: int
    start_id: int
    end_id: int
    temperature: float = 1.0
    frozen: bool = False
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def init(cls, vocab: Vocabulary, cfg: TeacherConfig) -> "TeacherLM":
        rng = np.random.default_rng(cfg.seed)
        V = len(vocab)
        return cls(
            _DirectionalLM.init(rng, V, cfg.emb_dim, cfg.hidden, vocab.pad_id),
            _DirectionalLM.init(rng, V, cfg.emb_dim, cfg.hidden, vocab.pad_id),
            V, vocab.pad_id, vocab.start_id, vocab.end_id, cfg.temperature, config=asdict(cfg),
        )

    @property
    def hidden(self) -> int:
        return self.forward.cell.hidden_dim

    @property
    def embed_dim(self) -> int:
        return 2 * self.hidden

    def parameters(self) -> dict[str, Tensor]:
        out = self.forward.named("forward")
        out.update(self.backward.named("backward"))
        return out

    def freeze(self) -> "TeacherLM":
        for p in self.parameters().values():
            p.requires_grad = False
            p.frozen = True
            p.grad = None
            p.data.setflags(write=False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _framed(seqs: Sequence[Sequence[int]], first: int, last: int, pad: int):
    """Inputs ``[first, s...]`` and targets ``[s..., last]``, PAD-padded."""
    T = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), T), pad, dtype=np.int64)
    targets = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, 0] = first
        inputs[i, 1:len(s) + 1] = s
        targets[i, :len(s)] = s
        targets[i, len(s)] = last
    return inputs, targets


def _lm_nll(lm: _DirectionalLM, inputs: np.ndarray, targets: np.ndarray, pad: int) -> tuple[Tensor, int]:
    states = lm.run(inputs)
    total = None
    count = 0
    V = lm.W_out.shape[0]
    for t, h in enumerate(states):
        tgt = targets[:, t]
        mask = tgt != pad
        if not mask.any():
            continue
        onehot = np.zeros((len(tgt), V))
        onehot[np.arange(len(tgt)), tgt] = mask
        term = (log_softmax(lm.logits(h)) * onehot).sum()
        total = term if total is None else total + term
        count += int(mask.sum())
    return total * (-1.0), count


def _sequences(pairs: Sequence[NewsReportPair], vocab: Vocabulary, max_len: int) -> list[list[int]]:
    seqs = []
    for p in pairs:
        seqs.append(vocab.encode(p.news_tokens)[:max_len])
        seqs.append(vocab.encode(p.report_tokens)[:max_len])
    return seqs


def perplexities(teacher: TeacherLM, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> tuple[float, float]:
    """Per-token perplexity of the forward and backward LMs over ``seqs``."""
    nll = [0.0, 0.0]
    n = [0, 0]
    for batch in batch_iter(list(seqs), batch_size):
        for d, (lm, first, last, rev) in enumerate(_directions(teacher)):
            b = [list(reversed(s)) if rev else list(s) for s in batch]
            inputs, targets = _framed(b, first, last, teacher.pad_id)
            loss, count = _lm_nll(lm, inputs, targets, teacher.pad_id)
            nll[d] += loss.item()
            n[d] += count
    return math.exp(nll[0] / n[0]), math.exp(nll[1] / n[1])


def _directions(t: TeacherLM):
    return ((t.forward, t.start_id, t.end_id, False), (t.backward, t.end_id, t.start_id, True))


def train_teacher(pairs: Sequence[NewsReportPair], vocab: Vocabulary, cfg: TeacherConfig | None = None) -> TeacherLM:
    """Train both directional LMs on news and report sequences, then freeze.

    ``teacher.history`` holds the perplexities measured after every epoch,
    with epoch 0 being the untrained model.
    """
    cfg = cfg or TeacherConfig()
    if not pairs:
        raise ValueError("teacher needs a non-empty corpus")
    teacher = TeacherLM.init(vocab, cfg)
    seqs = _sequences(pairs, vocab, cfg.max_len)
    params = list(teacher.parameters().values())
    state = AdamState(lr=cfg.lr)
    fwd0, bwd0 = perplexities(teacher, seqs)
    teacher.history.append({"epoch": 0, "ppl_forward": fwd0, "ppl_backward": bwd0})
    for epoch in range(1, cfg.epochs + 1):
        for batch in batch_iter(seqs, cfg.batch_size, shuffle_seed=cfg.seed * 1000 + epoch):
            for p in params:
                p.grad = None
            with Tape() as tape:
                total = None
                for lm, first, last, rev in _directions(teacher):
                    b = [list(reversed(s)) if rev else list(s) for s in batch]
                    inputs, targets = _framed(b, first, last, teacher.pad_id)
                    loss, count = _lm_nll(lm, inputs, targets, teacher.pad_id)
                    loss = loss * (1.0 / count)
                    total = loss if total is None else total + loss
            if not np.isfinite(total.item()):
                raise NonFiniteError(f"teacher loss diverged at epoch {epoch}")
            backward(total, tape)
            grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state)
        fwd, bwd = perplexities(teacher, seqs)
        teacher.history.append({"epoch": epoch, "ppl_forward": fwd, "ppl_backward": bwd})
        log.info("teacher epoch %d: ppl fwd %.3f bwd %.3f", epoch, fwd, bwd)
    return teacher.freeze()


def teacher_embed(ids: Sequence[int], teacher: TeacherLM) -> np.ndarray:
    """``[T, 2H]`` contextual embedding of an id sequence.

    Position ``i`` concatenates the forward state after reading
    ``<start> x_1..x_i`` with the backward state after ``<end> x_T..x_i``.
    """
    if not teacher.frozen:
        raise RuntimeError("teacher must be frozen before use")
    return teacher_embed_batch([list(ids)], teacher)[0]


def teacher_embed_batch(seqs: Sequence[Sequence[int]], teacher: TeacherLM) -> list[np.ndarray]:
    lengths = [len(s) for s in seqs]
    if min(lengths) < 1:
        raise ValueError("cannot embed an empty sequence")
    T = max(lengths)
    fwd_in = np.full((len(seqs), T + 1), teacher.pad_id, dtype=np.int64)
    bwd_in = np.full((len(seqs), T + 1), teacher.pad_id, dtype=np.int64)
    fwd_in[:, 0] = teacher.start_id
    bwd_in[:, 0] = teacher.end_id
    for i, s in enumerate(seqs):
        fwd_in[i, 1:len(s) + 1] = s
        bwd_in[i, 1:len(s) + 1] = s[::-1]
    fwd = np.stack([h.data for h in teacher.forward.run(fwd_in)], axis=1)  # [B, T+1, H]
    bwd = np.stack([h.data for h in teacher.backward.run(bwd_in)], axis=1)
    out = []
    for i, n in enumerate(lengths):
        f = fwd[i, 1:n + 1]
        b = bwd[i, 1:n + 1][::-1]
        out.append(np.concatenate([f, b], axis=-1))
    return out


def teacher_pooled(seqs: Sequence[Sequence[int]], teacher: TeacherLM) -> np.ndarray:
    """Token-mean of ``teacher_embed`` for each sequence, ``[B, 2H]``."""
    return np.stack([e.mean(axis=0) for e in teacher_embed_batch(seqs, teacher)])


def soft_targets(prefix: Sequence[int], teacher: TeacherLM) -> np.ndarray:
    """Tempered forward-LM distribution over the token following ``prefix``."""
    if len(prefix) == 0:
        raise ValueError("prefix must contain at least <start>")
    if not teacher.frozen:
        raise RuntimeError("teacher must be frozen before use")
    ids = np.asarray(prefix, dtype=np.int64)[None, :]
    h = teacher.forward.run(ids)[-1]
    return _softmax_np(teacher.forward.logits(h).data[0] / teacher.temperature)


def soft_target_matrix(inputs: np.ndarray, teacher: TeacherLM) -> np.ndarray:
    """Soft targets for every teacher-forced position of ``[B, T]`` decoder inputs.

    Row ``t`` is the teacher's next-token distribution given ``inputs[:, :t+1]``.
    """
    states = teacher.forward.run(inputs)
    logits = np.stack([teacher.forward.logits(h).data for h in states], axis=1)
    return _softmax_np(logits / teacher.temperature)


def distillation_loss(student_logits: Tensor, teacher_probs: np.ndarray, mask) -> Tensor:
    """Cross-entropy of student log-probabilities under teacher probabilities.

    Averaged over positions where ``mask`` is true. ``student_logits`` and
    ``teacher_probs`` are ``[N, V]``.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if student_logits.shape != teacher_probs.shape:
        raise ValueError(f"student {student_logits.shape} vs teacher {teacher_probs.shape}")
    sums = teacher_probs.sum(axis=-1)
    bad = (np.abs(sums - 1.0) > 1e-6) & (mask > 0)
    if bad.any():
        raise ValueError(f"teacher row {int(np.argmax(bad))} sums to {sums[bad][0]:.8f}, not 1")
    n = mask.sum()
    if n == 0:
        return Tensor(0.0)
    weights = teacher_probs * mask[:, None]
    return (log_softmax(student_logits) * weights).sum() * (-1.0 / n)


def save_teacher(path: str | os.PathLike, teacher: TeacherLM) -> None:
    write_json(path, teacher_to_blob(teacher))


def teacher_to_blob(teacher: TeacherLM) -> dict:
    return {
        "kind": "teacher",
        "frozen": teacher.frozen,
        "config": teacher.config,
        "meta": {"vocab_size": teacher.vocab_size, "pad_id": teacher.pad_id, "start_id": teacher.start_id,
                 "end_id": teacher.end_id, "temperature": teacher.temperature},
        "history": teacher.history,
        "params": encode_params(teacher.parameters()),
        "adam": None,
    }


def teacher_from_blob(blob: dict) -> TeacherLM:
    meta = blob["meta"]
    cfg = TeacherConfig(**blob["config"])
    vocab_stub = _VocabStub(meta)
    teacher = TeacherLM.init(vocab_stub, cfg)
    teacher.temperature = meta["temperature"]
    teacher.history = list(blob.get("history", []))
    arrays = decode_params(blob["params"])
    for name, p in teacher.parameters().items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"teacher parameter {name}: shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].copy()
    return teacher.freeze() if blob.get("frozen") else teacher


def load_teacher(path: str | os.PathLike) -> TeacherLM:
    return teacher_from_blob(read_json(path))


class _VocabStub:
    def __init__(self, meta):
        self._n = meta["vocab_size"]
        self.pad_id, self.start_id, self.end_id = meta["pad_id"], meta["start_id"], meta["end_id"]

    def __len__(self):
        return self._n
