"""Corpus BLEU-1..4 and macro ROUGE-1/2/L on pre-tokenized text, scaled to [0, 100]."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

METRIC_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rougeL")


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple[str, ...]
    reference: tuple[str, ...]

    def __post_init__(self):
        if not self.reference:
            raise ValueError("reference must be non-empty")

    @classmethod
    def of(cls, candidate, reference) -> "EvalPair":
        if isinstance(candidate, str):
            candidate = candidate.split()
        if isinstance(reference, str):
            reference = reference.split()
        return cls(tuple(candidate), tuple(reference))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped(cand: Sequence[str], ref: Sequence[str], n: int) -> tuple[int, int]:
    c, r = ngrams(cand, n), ngrams(ref, n)
    return sum(min(k, r[g]) for g, k in c.items()), max(len(cand) - n + 1, 0)


def _check(pairs: Sequence[EvalPair]) -> None:
    if not pairs:
        raise ValueError("no pairs to score")


def bleu(pairs: Sequence[EvalPair], n_max: int = 4, cumulative: bool = True) -> float:
    """Corpus BLEU with clipped counts pooled over all pairs.

    Precisions of order >= 2 use add-one smoothing. ``cumulative=False``
    returns the single order-``n_max`` precision (times the brevity penalty)
    instead of the geometric mean over orders 1..n_max.
    """
    _check(pairs)
    if n_max not in (1, 2, 3, 4):
        raise ValueError("n_max must be 1, 2, 3 or 4")
    cand_len = sum(len(p.candidate) for p in pairs)
    ref_len = sum(len(p.reference) for p in pairs)
    if cand_len == 0:
        return 0.0
    precisions = []
    for n in range(1, n_max + 1):
        match = total = 0
        for p in pairs:
            m, t = _clipped(p.candidate, p.reference, n)
            match += m
            total += t
        if n == 1:
            precisions.append(match / total)
        else:
            precisions.append((match + 1) / (total + 1))
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    used = precisions if cumulative else precisions[-1:]
    if min(used) == 0.0:
        return 0.0
    return 100.0 * bp * math.exp(sum(math.log(x) for x in used) / len(used))


def _f1(overlap: int, cand_total: int, ref_total: int, mode: str) -> float:
    if overlap == 0:
        return 0.0
    r = overlap / ref_total
    if mode == "recall":
        return r
    p = overlap / cand_total
    return 2 * p * r / (p + r)


def rouge_n(pairs: Sequence[EvalPair], n: int = 1, mode: str = "f1") -> float:
    """Per-pair clipped n-gram F1 (or recall), macro-averaged."""
    _check(pairs)
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    scores = []
    for p in pairs:
        c, r = ngrams(p.candidate, n), ngrams(p.reference, n)
        overlap = sum(min(k, r[g]) for g, k in c.items())
        scores.append(_f1(overlap, sum(c.values()), sum(r.values()), mode))
    return 100.0 * sum(scores) / len(scores)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair], mode: str = "f1") -> float:
    _check(pairs)
    scores = [_f1(lcs_length(p.candidate, p.reference), len(p.candidate), len(p.reference), mode)
              for p in pairs]
    return 100.0 * sum(scores) / len(scores)


def score_all(pairs: Sequence[EvalPair], rouge_mode: str = "f1") -> dict:
    out = {f"bleu{n}": bleu(pairs, n) for n in range(1, 5)}
    out["rouge1"] = rouge_n(pairs, 1, rouge_mode)
    out["rouge2"] = rouge_n(pairs, 2, rouge_mode)
    out["rougeL"] = rouge_l(pairs, rouge_mode)
    out["n_pairs"] = len(pairs)
    return out


def format_table(rows: Iterable[tuple[str, dict]], label: str = "Method") -> str:
    """Aligned plain-text table, one row per ``(name, scores)``."""
    rows = list(rows)
    headers = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L"]
    width = max([len(label)] + [len(name) for name, _ in rows])
    lines = [f"{label:<{width}}  " + "  ".join(f"{h:>7}" for h in headers)]
    lines.append("-" * len(lines[0]))
    for name, s in rows:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{s[k]:>7.2f}" for k in METRIC_NAMES))
    return "\n".join(lines)


def write_report(path, scores: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scores, fh, indent=2, sort_keys=True)
