"""Retrieval-conditioned CVAE with a distillation teacher.

Data flow for one batch::

    news --Bi-GRU--> final --heads--> prior p(z1|x)
    neighbours (news, report) --Bi-GRU + teacher embeddings--> pooled
        --align MLP--> heads --> knowledge q(z2|X,Y)
    posterior = prior (x) knowledge     (product of experts)
    z1 ~ posterior;  h0 = A [z1; final] + a;  decoder GRU over [emb(y_<t); z1]
    logits = W_o tanh(W_m h_t + b_m) + b_o
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import NewsReportPair, Vocabulary, encode_example
from .latent import GaussianParams, gaussian_head, kl_divergence, product_of_experts, reparameterize
from .layers import EmbeddingTable, GRUCellParams, MlpParams, bigru_run, embed, gru_cell, masked_mean, mlp2
from .numerics import NonFiniteError, Tensor, concat, dropout, log_softmax, sigmoid, tanh
from .numerics.tensor import stack
from .retrieval import NeighborIndex, build_index, query_neighbors
from .teacher import TeacherConfig, TeacherLM, distillation_loss, soft_target_matrix, teacher_pooled


@dataclass
class CvaeKdConfig:
    hidden: int = 256
    d_z: int = 16
    d_emb: int = 128
    dropout_decoder: float = 0.5
    lr: float = 0.001
    batch: int = 16
    max_enc: int = 30
    max_dec: int = 200
    k_neighbors: int = 5
    alpha: float = 0.5
    alpha_learnable: bool = False
    kl_anneal_steps: int = 2000
    kd_enabled: bool = True
    seed: int = 0
    share_encoder: bool = True
    clip_norm: float = 5.0
    epochs: int = 10
    min_tf: int = 5
    tf_strict: bool = False
    teacher_hidden: int = 128
    teacher_emb: int = 64
    teacher_epochs: int = 20
    teacher_lr: float = 0.005
    temperature: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("hidden", "d_z", "d_emb", "batch", "max_enc", "max_dec", "k_neighbors",
                     "epochs", "min_tf", "teacher_hidden", "teacher_emb"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_enc < 2 or self.max_dec < 2:
            raise ValueError("max_enc and max_dec must be >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.dropout_decoder < 1.0:
            raise ValueError("dropout_decoder must lie in [0, 1)")
        if self.lr < 0 or self.kl_anneal_steps < 0 or self.temperature <= 0:
            raise ValueError("lr and kl_anneal_steps must be >= 0, temperature > 0")

    def replace(self, **changes) -> "CvaeKdConfig":
        return dataclasses.replace(self, **changes)

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(emb_dim=self.teacher_emb, hidden=self.teacher_hidden, epochs=self.teacher_epochs,
                             lr=self.teacher_lr, batch_size=self.batch, max_len=self.max_dec,
                             temperature=self.temperature, clip_norm=self.clip_norm, seed=self.seed)


# --- noise -----------------------------------------------------------------

class NoiseSource:
    """Seeded source of latent noise and dropout keep-masks."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def keep_mask(self, shape, rate: float) -> np.ndarray | None:
        if rate <= 0.0:
            return None
        return (self.rng.random(shape) >= rate).astype(np.float64)


class ZeroNoise(NoiseSource):
    """eps = 0 and no dropout: the deterministic evaluation mode."""

    def __init__(self):
        pass

    def normal(self, shape) -> np.ndarray:
        return np.zeros(shape)

    def keep_mask(self, shape, rate: float):
        return None


class RecordedNoise(NoiseSource):
    """Draws like ``NoiseSource`` and remembers them for ``replay()``."""

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.draws: list = []

    def normal(self, shape):
        x = super().normal(shape)
        self.draws.append(x)
        return x

    def keep_mask(self, shape, rate):
        x = super().keep_mask(shape, rate)
        self.draws.append(x)
        return x

    def replay(self) -> "ReplayNoise":
        return ReplayNoise(self.draws)


class ReplayNoise(NoiseSource):
    """Returns previously recorded draws in order, restarting on ``rewind()``."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.pos = 0

    def rewind(self) -> "ReplayNoise":
        self.pos = 0
        return self

    def _next(self):
        x = self.draws[self.pos]
        self.pos += 1
        return x

    def normal(self, shape):
        return self._next()

    def keep_mask(self, shape, rate):
        return self._next()


# --- parameters --------------------------------------------------------------

@dataclass
class CvaeKdModel:
    config: CvaeKdConfig
    vocab_size: int
    embedding: EmbeddingTable
    enc_fwd: GRUCellParams
    enc_bwd: GRUCellParams
    bg_fwd: GRUCellParams | None
    bg_bwd: GRUCellParams | None
    prior_mu: MlpParams
    prior_sigma: MlpParams
    align: MlpParams
    know_mu: MlpParams
    know_sigma: MlpParams
    W_init: Tensor
    b_init: Tensor
    dec: GRUCellParams
    W_m: Tensor
    b_m: Tensor
    W_o: Tensor
    b_o: Tensor
    alpha_raw: Tensor | None = None

    @classmethod
    def init(cls, config: CvaeKdConfig, vocab_size: int, pad_id: int = 0) -> "CvaeKdModel":
        rng = np.random.default_rng(config.seed)
        H, E, Z = config.hidden, config.d_emb, config.d_z
        feat = 2 * (2 * H + 2 * config.teacher_hidden)

        def mat(shape, name):
            return Tensor(rng.uniform(-1, 1, size=shape) / np.sqrt(shape[1]), requires_grad=True, name=name)

        emb = EmbeddingTable.init(rng, vocab_size, E, pad_id)
        enc_fwd = GRUCellParams.init(rng, E, H)
        enc_bwd = GRUCellParams.init(rng, E, H)
        bg_fwd = bg_bwd = None
        if not config.share_encoder:
            bg_fwd = GRUCellParams.init(rng, E, H)
            bg_bwd = GRUCellParams.init(rng, E, H)
        alpha_raw = None
        if config.alpha_learnable:
            a = min(max(config.alpha, 1e-6), 1 - 1e-6)
            alpha_raw = Tensor(np.array(np.log(a / (1 - a))), requires_grad=True, name="alpha_raw")
        return cls(
            config=config,
            vocab_size=vocab_size,
            embedding=emb,
            enc_fwd=enc_fwd,
            enc_bwd=enc_bwd,
            bg_fwd=bg_fwd,
            bg_bwd=bg_bwd,
            prior_mu=MlpParams.init(rng, 2 * H, H, Z),
            prior_sigma=MlpParams.init(rng, 2 * H, H, Z),
            align=MlpParams.init(rng, feat, H, 2 * H),
            know_mu=MlpParams.init(rng, 2 * H, H, Z),
            know_sigma=MlpParams.init(rng, 2 * H, H, Z),
            W_init=mat((H, Z + 2 * H), "W_init"),
            b_init=Tensor(np.zeros(H), requires_grad=True, name="b_init"),
            dec=GRUCellParams.init(rng, E + Z, H),
            W_m=mat((H, H), "W_m"),
            b_m=Tensor(np.zeros(H), requires_grad=True, name="b_m"),
            W_o=mat((vocab_size, H), "W_o"),
            b_o=Tensor(np.zeros(vocab_size), requires_grad=True, name="b_o"),
            alpha_raw=alpha_raw,
        )

    @property
    def background_cells(self) -> tuple[GRUCellParams, GRUCellParams]:
        if self.bg_fwd is None:
            return self.enc_fwd, self.enc_bwd
        return self.bg_fwd, self.bg_bwd

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.embedding.named("embedding"))
        for name in ("enc_fwd", "enc_bwd", "bg_fwd", "bg_bwd", "prior_mu", "prior_sigma",
                     "align", "know_mu", "know_sigma"):
            group = getattr(self, name)
            if group is not None:
                out.update(group.named(name))
        out["W_init"] = self.W_init
        out["b_init"] = self.b_init
        out.update(self.dec.named("dec"))
        for name in ("W_m", "b_m", "W_o", "b_o"):
            out[name] = getattr(self, name)
        if self.alpha_raw is not None:
            out["alpha_raw"] = self.alpha_raw
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint parameters differ from model: {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def alpha(self) -> Tensor:
        if self.alpha_raw is None:
            return Tensor(self.config.alpha)
        return sigmoid(self.alpha_raw)


# --- background knowledge ----------------------------------------------------

class KnowledgeBase:
    """Neighbour lookup plus cached per-pair arrays for the background path.

    Holds the retrieval corpus (normally the training split), its TF-IDF index,
    and memoised neighbour lists and teacher embeddings.
    """

    def __init__(self, pairs: Sequence[NewsReportPair], vocab: Vocabulary, config: CvaeKdConfig,
                 index: NeighborIndex | None = None):
        self.pairs = {p.id: p for p in pairs}
        self.vocab = vocab
        self.config = config
        self.index = index if index is not None else build_index(list(pairs), config.k_neighbors)
        self._neighbors: dict = {}
        self._teacher: dict = {}

    def neighbors(self, news_tokens: Sequence[str], exclude_id: str | None = None) -> list[str]:
        key = (exclude_id, tuple(news_tokens))
        if key not in self._neighbors:
            self._neighbors[key] = query_neighbors(self.index, news_tokens, self.config.k_neighbors, exclude_id)
        return self._neighbors[key]

    def news_ids(self, pid: str) -> list[int]:
        return self.vocab.encode(self.pairs[pid].news_tokens[: self.config.max_enc])

    def report_ids(self, pid: str) -> list[int]:
        return self.vocab.encode(self.pairs[pid].report_tokens[: self.config.max_dec])

    def teacher_features(self, pids: Sequence[str], teacher: TeacherLM) -> tuple[np.ndarray, np.ndarray]:
        todo = [p for p in pids if p not in self._teacher]
        if todo:
            news = teacher_pooled([self.news_ids(p) for p in todo], teacher)
            reps = teacher_pooled([self.report_ids(p) for p in todo], teacher)
            for p, a, b in zip(todo, news, reps):
                self._teacher[p] = (a, b)
        return (np.stack([self._teacher[p][0] for p in pids]),
                np.stack([self._teacher[p][1] for p in pids]))


def _pad_ids(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


@dataclass
class NeighborBlock:
    owner: np.ndarray  # [N] index of the example each neighbour belongs to
    news_ids: np.ndarray
    news_len: np.ndarray
    report_ids: np.ndarray
    report_len: np.ndarray
    teacher_news: np.ndarray  # [N, 2*teacher_hidden]
    teacher_report: np.ndarray
    n_examples: int

    @property
    def size(self) -> int:
        return len(self.owner)


def neighbor_block(neighbor_ids: Sequence[Sequence[str]], kb: KnowledgeBase, teacher: TeacherLM | None,
                   use_teacher: bool) -> NeighborBlock | None:
    owner = np.array([i for i, ids in enumerate(neighbor_ids) for _ in ids], dtype=np.int64)
    flat = [pid for ids in neighbor_ids for pid in ids]
    if not flat:
        return None
    pad = kb.vocab.pad_id
    news, news_len = _pad_ids([kb.news_ids(p) for p in flat], pad)
    reps, rep_len = _pad_ids([kb.report_ids(p) for p in flat], pad)
    width = 2 * kb.config.teacher_hidden
    if use_teacher and teacher is not None:
        if teacher.embed_dim != width:
            raise ValueError(f"teacher embedding width {teacher.embed_dim} != configured {width}")
        tn, tr = kb.teacher_features(flat, teacher)
    else:
        tn = tr = np.zeros((len(flat), width))
    return NeighborBlock(owner, news, news_len, reps, rep_len, tn, tr, len(neighbor_ids))


@dataclass
class Batch:
    ids: list[str]
    news_ids: np.ndarray
    news_len: np.ndarray
    report_ids: np.ndarray
    report_len: np.ndarray
    neighbors: NeighborBlock | None
    soft_targets: np.ndarray | None = None  # [B, L-1, V]

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(pairs: Sequence[NewsReportPair], vocab: Vocabulary, kb: KnowledgeBase, config: CvaeKdConfig,
               teacher: TeacherLM | None = None, exclude_self: bool = True) -> Batch:
    """Encode pairs, retrieve neighbours (never the pair itself), precompute teacher arrays."""
    use_teacher = config.kd_enabled and teacher is not None
    encoded = [encode_example(p, vocab, config.max_enc, config.max_dec) for p in pairs]
    news_len = np.array([e.news_len for e in encoded], dtype=np.int64)
    report_len = np.array([e.report_len for e in encoded], dtype=np.int64)
    news = np.stack([e.news_ids for e in encoded])[:, : news_len.max()]
    reports = np.stack([e.report_ids for e in encoded])[:, : report_len.max()]
    nb_ids = [kb.neighbors(p.news_tokens, p.id if exclude_self else None) for p in pairs]
    block = neighbor_block(nb_ids, kb, teacher, use_teacher)
    soft = soft_target_matrix(reports[:, :-1], teacher) if use_teacher else None
    return Batch([p.id for p in pairs], news, news_len, reports, report_len, block, soft)


# --- forward pieces ------------------------------------------------------------

def _embed_steps(ids: np.ndarray, table: EmbeddingTable) -> list[Tensor]:
    return [embed(ids[:, t], table) for t in range(ids.shape[1])]


def encode_news(news_ids: np.ndarray, news_len, m: CvaeKdModel):
    """Bi-GRU over ``[B, T]`` news ids; returns ``(states, final [B, 2H], prior)``."""
    states, final = bigru_run(_embed_steps(news_ids, m.embedding), news_len, m.enc_fwd, m.enc_bwd)
    return states, final, gaussian_head(final, m.prior_mu, m.prior_sigma)


def background_latent(block: NeighborBlock | None, m: CvaeKdModel, n_examples: int | None = None):
    """Knowledge distribution q(z2 | X_s, Y_s) per example.

    Returns ``(knowledge, Y_em)``. Examples without neighbours get N(0, I);
    with no neighbours at all ``Y_em`` is None.
    """
    B = block.n_examples if block is not None else n_examples
    if block is None:
        return GaussianParams.standard((B, m.config.d_z)), None
    fwd, bwd = m.background_cells
    x_states, _ = bigru_run(_embed_steps(block.news_ids, m.embedding), block.news_len, fwd, bwd)
    y_states, _ = bigru_run(_embed_steps(block.report_ids, m.embedding), block.report_len, fwd, bwd)
    X_em = concat([masked_mean(x_states, block.news_len), Tensor(block.teacher_news)], axis=-1)
    Y_em = concat([masked_mean(y_states, block.report_len), Tensor(block.teacher_report)], axis=-1)
    counts = np.bincount(block.owner, minlength=B).astype(np.float64)
    pool = np.zeros((B, block.size))
    pool[block.owner, np.arange(block.size)] = 1.0 / counts[block.owner]
    pooled = Tensor(pool) @ concat([X_em, Y_em], axis=-1)
    g = gaussian_head(mlp2(pooled, m.align), m.know_mu, m.know_sigma)
    has = (counts > 0).astype(np.float64)[:, None]
    if has.all():
        return g, Y_em
    return GaussianParams(g.mu * has, g.log_var * has), Y_em


def decoder_init(z: Tensor, final: Tensor, m: CvaeKdModel) -> Tensor:
    return concat([z, final], axis=-1) @ m.W_init.T + m.b_init


def output_logits(h: Tensor, m: CvaeKdModel) -> Tensor:
    return tanh(h @ m.W_m.T + m.b_m) @ m.W_o.T + m.b_o


def decode_teacher_forced(inputs: np.ndarray, z: Tensor, final: Tensor, m: CvaeKdModel,
                          noise: NoiseSource) -> Tensor:
    """Logits ``[B * T, V]`` (row-major over batch then step) for ``[B, T]`` inputs."""
    B, T = inputs.shape
    h = decoder_init(z, final, m)
    rate = m.config.dropout_decoder
    hs = []
    for t in range(T):
        x = concat([embed(inputs[:, t], m.embedding), z], axis=-1)
        x = dropout(x, noise.keep_mask(x.shape, rate), rate)
        h = gru_cell(x, h, m.dec)
        hs.append(h)
    H = stack(hs, axis=1).reshape(B * T, -1)
    return output_logits(H, m)


def kl_weight(step: int, anneal_steps: int) -> float:
    """Linear warm-up 0 -> 1 over ``anneal_steps``; constant 1 when disabled."""
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, max(0, step) / anneal_steps)


@dataclass
class LossBreakdown:
    recon: Tensor
    kl: Tensor
    l_cvae: Tensor
    l_kd: Tensor
    total: Tensor
    kl_weight_applied: float
    alpha: float = 1.0
    extras: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, float]:
        return {"recon": self.recon.item(), "kl": self.kl.item(), "l_cvae": self.l_cvae.item(),
                "l_kd": self.l_kd.item(), "total": self.total.item(),
                "kl_weight_applied": self.kl_weight_applied, "alpha": self.alpha}


def compute_losses(batch: Batch, m: CvaeKdModel, teacher: TeacherLM | None, step: int,
                   noise: NoiseSource) -> LossBreakdown:
    """Reconstruction, KL(posterior || knowledge), distillation and their mix."""
    cfg = m.config
    _, final, prior = encode_news(batch.news_ids, batch.news_len, m)
    knowledge, _ = background_latent(batch.neighbors, m, len(batch))
    posterior = product_of_experts(prior, knowledge)
    z = reparameterize(posterior, noise.normal(posterior.mu.shape))

    inputs = batch.report_ids[:, :-1]
    targets = batch.report_ids[:, 1:]
    B, T = inputs.shape
    logits = decode_teacher_forced(inputs, z, final, m, noise)
    mask = (targets != m.embedding.pad_id).reshape(-1).astype(np.float64)
    onehot = np.zeros((B * T, m.vocab_size))
    onehot[np.arange(B * T), targets.reshape(-1)] = mask
    n_tok = mask.sum()
    recon = (log_softmax(logits) * onehot).sum() * (-1.0 / n_tok)

    kl = kl_divergence(posterior, knowledge).sum() * (1.0 / B)
    w = kl_weight(step, cfg.kl_anneal_steps)
    l_cvae = recon + kl * w

    use_kd = cfg.kd_enabled and teacher is not None
    if use_kd:
        if batch.soft_targets is None:
            raise ValueError("batch was built without teacher soft targets")
        l_kd = distillation_loss(logits, batch.soft_targets.reshape(B * T, -1), mask)
        a = m.alpha()
        total = a * l_cvae + (1.0 - a) * l_kd
        alpha = a.item()
    else:
        l_kd = Tensor(0.0)
        total = l_cvae
        alpha = 1.0
    if not np.isfinite(total.item()):
        raise NonFiniteError(f"non-finite loss at step {step}")
    return LossBreakdown(recon, kl, l_cvae, l_kd, total, w, alpha,
                         extras={"prior": prior, "knowledge": knowledge, "posterior": posterior, "z": z})


# --- generation ---------------------------------------------------------------

def generate(news_tokens: Sequence[str], m: CvaeKdModel, teacher: TeacherLM | None, kb: KnowledgeBase,
             max_len: int, exclude_id: str | None = None, noise: NoiseSource | None = None) -> list[str]:
    """Greedy decoding of a report for ``news_tokens``.

    ``noise=None`` uses eps = 0 (deterministic); pass a ``NoiseSource`` to sample
    z1. ``<pad>`` and ``<start>`` are never emitted; ``<end>`` stops decoding.
    """
    if not news_tokens:
        raise ValueError("input news is empty")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cfg = m.config
    vocab = kb.vocab
    noise = noise or ZeroNoise()
    ids = vocab.encode(list(news_tokens)[: cfg.max_enc])
    news = np.array([ids], dtype=np.int64)
    _, final, prior = encode_news(news, [len(ids)], m)
    nb = [kb.neighbors(news_tokens, exclude_id)]
    block = neighbor_block(nb, kb, teacher, cfg.kd_enabled and teacher is not None)
    knowledge, _ = background_latent(block, m, 1)
    posterior = product_of_experts(prior, knowledge)
    z = reparameterize(posterior, noise.normal(posterior.mu.shape))

    h = decoder_init(z, final, m)
    banned = np.array([vocab.pad_id, vocab.start_id])
    prev = vocab.start_id
    out: list[str] = []
    while len(out) < max_len:
        x = concat([embed(np.array([prev]), m.embedding), z], axis=-1)
        h = gru_cell(x, h, m.dec)
        logits = output_logits(h, m).data[0].copy()
        logits[banned] = -np.inf
        prev = int(np.argmax(logits))
        if prev == vocab.end_id:
            break
        out.append(vocab.itos[prev])
    return out
