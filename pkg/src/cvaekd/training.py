"""Training step, epoch loop and model checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import NewsReportPair, Vocabulary, batch_iter
from .model import (
    Batch,
    CvaeKdConfig,
    CvaeKdModel,
    KnowledgeBase,
    LossBreakdown,
    NoiseSource,
    ZeroNoise,
    compute_losses,
    make_batch,
)
from .numerics import AdamState, NonFiniteError, Tape, adam_step, backward, clip_by_global_norm
from .numerics.checkpoint import decode_adam, decode_params, encode_adam, encode_params, read_json, write_json
from .teacher import TeacherLM, teacher_from_blob, teacher_to_blob

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "recon", "kl", "l_cvae", "l_kd", "total")


def train_step(batch: Batch, m: CvaeKdModel, teacher: TeacherLM | None, state: AdamState, step: int,
               noise: NoiseSource) -> LossBreakdown:
    """Forward, backward, global-norm clip and one Adam update.

    On a non-finite loss or gradient nothing is updated and ``NonFiniteError``
    propagates.
    """
    params = list(m.parameters().values())
    for p in params:
        p.grad = None
    with Tape() as tape:
        losses = compute_losses(batch, m, teacher, step, noise)
    backward(losses.total, tape)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteError(f"non-finite gradient at step {step}")
    grads, _ = clip_by_global_norm(grads, m.config.clip_norm)
    adam_step(params, grads, state)
    return losses


def evaluate_loss(pairs: Sequence[NewsReportPair], m: CvaeKdModel, teacher: TeacherLM | None, vocab: Vocabulary,
                  kb: KnowledgeBase, step: int) -> float:
    """Mean total loss over ``pairs`` with eps = 0 and dropout off."""
    if not pairs:
        return float("nan")
    total, n = 0.0, 0
    for chunk in batch_iter(list(pairs), m.config.batch):
        b = make_batch(chunk, vocab, kb, m.config, teacher)
        total += compute_losses(b, m, teacher, step, ZeroNoise()).total.item() * len(chunk)
        n += len(chunk)
    return total / n


@dataclass
class TrainResult:
    model: CvaeKdModel
    state: AdamState
    kb: KnowledgeBase
    history: list[dict] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    steps: int = 0


def fit(train_pairs: Sequence[NewsReportPair], vocab: Vocabulary, config: CvaeKdConfig,
        teacher: TeacherLM | None = None, val_pairs: Sequence[NewsReportPair] = (),
        epochs: int | None = None, max_steps: int | None = None,
        on_epoch: Callable[[int, "TrainResult"], None] | None = None) -> TrainResult:
    """Train a fresh model on ``train_pairs``; neighbours come from the same split."""
    model = CvaeKdModel.init(config, len(vocab), vocab.pad_id)
    kb = KnowledgeBase(train_pairs, vocab, config)
    state = AdamState(lr=config.lr)
    noise = NoiseSource(config.seed + 1)
    result = TrainResult(model, state, kb)
    epochs = config.epochs if epochs is None else epochs
    step = 0
    for epoch in range(1, epochs + 1):
        for chunk in batch_iter(list(train_pairs), config.batch, shuffle_seed=config.seed * 7919 + epoch):
            batch = make_batch(chunk, vocab, kb, config, teacher)
            losses = train_step(batch, model, teacher, state, step, noise)
            step += 1
            row = {"step": step, **{k: losses.to_dict()[k] for k in LOSS_COLUMNS[1:]}}
            result.history.append(row)
            if max_steps is not None and step >= max_steps:
                break
        result.steps = step
        result.val_losses.append(evaluate_loss(val_pairs, model, teacher, vocab, kb, step))
        log.info("epoch %d: step %d, last total %.4f, val %.4f", epoch, step,
                 result.history[-1]["total"] if result.history else float("nan"), result.val_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, result)
        if max_steps is not None and step >= max_steps:
            break
    return result


def write_loss_csv(path: str | os.PathLike, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


def save_model(path: str | os.PathLike, m: CvaeKdModel, vocab: Vocabulary, state: AdamState | None = None,
               teacher: TeacherLM | None = None, train_ids: Sequence[str] = (), **extra) -> None:
    """Write a self-contained checkpoint: config, vocabulary, weights, optimizer, teacher."""
    write_json(path, {
        "kind": "cvaekd",
        "config": dataclasses.asdict(m.config),
        "seed": m.config.seed,
        "vocab": vocab.itos,
        "params": encode_params(m.parameters()),
        "adam": encode_adam(state),
        "teacher": teacher_to_blob(teacher) if teacher is not None else None,
        "train_ids": list(train_ids),
        **extra,
    })


@dataclass
class LoadedModel:
    model: CvaeKdModel
    vocab: Vocabulary
    state: AdamState | None
    teacher: TeacherLM | None
    train_ids: list[str]
    blob: dict


def load_model(path: str | os.PathLike) -> LoadedModel:
    blob = read_json(path)
    if blob.get("kind") != "cvaekd":
        raise ValueError(f"{path} is not a model checkpoint")
    config = CvaeKdConfig(**blob["config"])
    vocab = Vocabulary(blob["vocab"])
    model = CvaeKdModel.init(config, len(vocab), vocab.pad_id)
    model.load_arrays(decode_params(blob["params"]))
    shapes = [p.shape for p in model.parameters().values()]
    state = decode_adam(blob.get("adam"), shapes)
    teacher = teacher_from_blob(blob["teacher"]) if blob.get("teacher") else None
    return LoadedModel(model, vocab, state, teacher, list(blob.get("train_ids", [])), blob)
