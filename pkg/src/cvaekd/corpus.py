"""News/report pairs, vocabulary with special tokens, encoding and batching."""
from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, START, END, NUM = "<pad>", "<unk>", "<start>", "<end>", "<num>"
SPECIALS = (PAD, UNK, START, END, NUM)

_NUMERIC = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class NewsReportPair:
    id: str
    news_tokens: tuple[str, ...]
    report_tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.news_tokens or not self.report_tokens:
            raise CorpusError(f"pair {self.id!r}: news and report must be non-empty")
        for tok in (*self.news_tokens, *self.report_tokens):
            if not tok or any(c.isspace() for c in tok):
                raise CorpusError(f"pair {self.id!r}: token {tok!r} is empty or contains whitespace")

    @classmethod
    def from_text(cls, id: str, news: str, report: str) -> "NewsReportPair":
        return cls(id, tuple(news.split()), tuple(report.split()))


def is_numeric(token: str) -> bool:
    return _NUMERIC.fullmatch(token) is not None


def normalize(token: str) -> str:
    return NUM if is_numeric(token) else token


def load_corpus(path: str | os.PathLike) -> list[NewsReportPair]:
    """Read a JSONL corpus of ``{"id", "news", "report"}`` records.

    Blank lines are skipped. Raises ``CorpusError`` naming the 1-based line of
    the first malformed record or duplicate id.
    """
    pairs: list[NewsReportPair] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            for key in ("id", "news", "report"):
                if not isinstance(rec.get(key), str):
                    raise CorpusError(f"line {lineno}: missing or non-string field {key!r}")
            if rec["id"] in seen:
                raise CorpusError(f"line {lineno}: duplicate id {rec['id']!r}")
            try:
                pair = NewsReportPair.from_text(rec["id"], rec["news"], rec["report"])
            except CorpusError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            seen.add(rec["id"])
            pairs.append(pair)
    return pairs


def write_corpus(path: str | os.PathLike, pairs: Iterable[NewsReportPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {"id": p.id, "news": " ".join(p.news_tokens), "report": " ".join(p.report_tokens)}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class Vocabulary:
    itos: list[str]
    min_term_frequency: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens " + " ".join(SPECIALS))
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    start_id = property(lambda self: 2)
    end_id = property(lambda self: 3)
    num_id = property(lambda self: 4)

    def id_of(self, token: str) -> int:
        return self.stoi.get(normalize(token), 1)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def term_frequencies(pairs: Iterable[NewsReportPair]) -> Counter:
    counts: Counter = Counter()
    for p in pairs:
        counts.update(normalize(t) for t in p.news_tokens)
        counts.update(normalize(t) for t in p.report_tokens)
    return counts


def build_vocabulary(pairs: Sequence[NewsReportPair], min_tf: int = 5, strict: bool = False) -> Vocabulary:
    """Keep tokens whose corpus frequency (news + reports) is >= ``min_tf``.

    ``strict=True`` switches the threshold to ``> min_tf``. Numeric tokens are
    folded into ``<num>`` before counting. Non-special ids are assigned by
    descending frequency, ties alphabetical.
    """
    if min_tf < 1:
        raise ValueError("min_tf must be >= 1")
    if not pairs:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = term_frequencies(pairs)
    keep = [
        tok for tok, n in counts.items()
        if tok not in SPECIALS and (n > min_tf if strict else n >= min_tf)
    ]
    keep.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + keep, min_term_frequency=min_tf)


@dataclass(frozen=True)
class EncodedExample:
    id: str
    news_ids: np.ndarray
    news_len: int
    report_ids: np.ndarray
    report_len: int


def encode_example(pair: NewsReportPair, vocab: Vocabulary, max_enc: int, max_dec: int) -> EncodedExample:
    if max_enc < 2 or max_dec < 2:
        raise ValueError("max_enc and max_dec must be >= 2")
    news = vocab.encode(pair.news_tokens[:max_enc])
    news_ids = np.full(max_enc, vocab.pad_id, dtype=np.int64)
    news_ids[: len(news)] = news
    body = vocab.encode(pair.report_tokens[: max_dec - 2])
    report = [vocab.start_id, *body, vocab.end_id]
    report_ids = np.full(max_dec, vocab.pad_id, dtype=np.int64)
    report_ids[: len(report)] = report
    return EncodedExample(pair.id, news_ids, len(news), report_ids, len(report))


def batch_iter(examples: Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator[list]:
    """Yield consecutive batches, the last one possibly short.

    With a seed the order is a seeded permutation; ``None`` keeps input order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def split_pairs(
    pairs: Sequence[NewsReportPair], seed: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[list[NewsReportPair], list[NewsReportPair], list[NewsReportPair]]:
    """Seeded shuffle into train/validation/test. Train is never empty."""
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = max(1, n - n_val - n_test)
    shuffled = [pairs[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return train, val, test


_TOPICS = {
    "inflation": ["cpi", "prices", "wage", "inflation", "fed", "rate"],
    "housing": ["housing", "inventory", "construction", "mortgage", "starts", "permits"],
    "manufacturing": ["pmi", "factory", "orders", "output", "capex", "manufacturing"],
    "consumption": ["retail", "spending", "consumer", "sales", "income", "demand"],
    "trade": ["exports", "imports", "tariff", "surplus", "shipping", "yuan"],
    "credit": ["loans", "bank", "liquidity", "bond", "yield", "credit"],
}
_DIRECTIONS = ["rise", "fall", "stabilize", "rebound", "slow"]
_FILLER = ["we", "expect", "the", "to", "in", "quarter", "as", "and", "growth", "market", "policy", "outlook"]


def synthetic_corpus(n_pairs: int, seed: int = 0, news_len: tuple[int, int] = (6, 10),
                     report_len: tuple[int, int] = (14, 24)) -> list[NewsReportPair]:
    """Small topic-structured corpus for tests and demos.

    Each report is a deterministic function of its news (topic words, a
    direction and a number), so the mapping is learnable and neighbours
    sharing a topic carry useful background.
    """
    rng = np.random.default_rng(seed)
    topics = sorted(_TOPICS)
    out = []
    for i in range(n_pairs):
        topic = topics[rng.integers(len(topics))]
        pool = _TOPICS[topic]
        m = int(rng.integers(news_len[0], news_len[1] + 1))
        news = [pool[j] for j in rng.integers(len(pool), size=m)]
        direction = _DIRECTIONS[rng.integers(len(_DIRECTIONS))]
        news.insert(int(rng.integers(len(news))), direction)
        pct = f"{rng.integers(1, 9)}.{rng.integers(0, 10)}"
        news.append(pct)
        n = int(rng.integers(report_len[0], report_len[1] + 1))
        report = ["we", "expect", topic, news[0], "to", direction, "by", pct, "in", "the", "quarter"]
        while len(report) < n:
            report.append(pool[len(report) % len(pool)] if len(report) % 3 else _FILLER[len(report) % len(_FILLER)])
        report.extend(["as", news[-2], "and", news[1]])
        out.append(NewsReportPair(f"p{i:05d}", tuple(news), tuple(report)))
    return out
