"""TF-IDF cosine k-nearest-neighbour search over the news side of a corpus."""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .corpus import NewsReportPair


@dataclass(frozen=True)
class NeighborIndex:
    doc_ids: tuple[str, ...]
    term_index: dict[str, int]
    idf: np.ndarray
    matrix: sparse.csr_matrix  # [D, terms], rows L2-normalized
    k_default: int = 5

    def __len__(self) -> int:
        return len(self.doc_ids)

    def vectorize(self, tokens: Sequence[str]) -> sparse.csr_matrix:
        counts = Counter(t for t in tokens if t in self.term_index)
        cols = np.array([self.term_index[t] for t in counts], dtype=np.int64)
        vals = np.array([counts[t] for t in counts], dtype=np.float64) * self.idf[cols]
        norm = np.sqrt(np.sum(vals * vals))
        if norm > 0:
            vals = vals / norm
        return sparse.csr_matrix((vals, (np.zeros_like(cols), cols)), shape=(1, len(self.term_index)))

    def dump(self, path: str | os.PathLike) -> None:
        terms = sorted(self.term_index, key=self.term_index.get)
        docs = []
        for i, doc_id in enumerate(self.doc_ids):
            row = self.matrix.getrow(i)
            order = np.argsort(row.indices)
            docs.append({"id": doc_id, "indices": row.indices[order].tolist(), "values": row.data[order].tolist()})
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"idf": {t: float(self.idf[self.term_index[t]]) for t in terms},
                       "terms": terms, "docs": docs}, fh, ensure_ascii=False)


def build_index(pairs: Sequence[NewsReportPair], k_default: int = 5) -> NeighborIndex:
    """Raw-count tf times ``ln((1 + D) / (1 + df)) + 1``, rows L2-normalized."""
    if not pairs:
        raise ValueError("cannot index an empty corpus")
    term_index: dict[str, int] = {}
    rows, cols, vals = [], [], []
    df: Counter = Counter()
    for r, p in enumerate(pairs):
        counts = Counter(p.news_tokens)
        df.update(counts.keys())
        for tok, n in counts.items():
            rows.append(r)
            cols.append(term_index.setdefault(tok, len(term_index)))
            vals.append(float(n))
    D = len(pairs)
    idf = np.zeros(len(term_index))
    for tok, j in term_index.items():
        idf[j] = math.log((1 + D) / (1 + df[tok])) + 1.0
    tf = sparse.csr_matrix((vals, (rows, cols)), shape=(D, len(term_index)))
    weighted = tf.multiply(idf[None, :]).tocsr()
    norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    matrix = sparse.diags(1.0 / norms) @ weighted
    return NeighborIndex(tuple(p.id for p in pairs), term_index, idf, matrix.tocsr(), k_default)


def query_neighbors(index: NeighborIndex, news_tokens: Sequence[str], k: int | None = None,
                    exclude_id: str | None = None) -> list[str]:
    """Top-``k`` document ids by cosine similarity.

    Ties are broken by ascending id; ``exclude_id`` is never returned.
    """
    k = index.k_default if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = (index.matrix @ index.vectorize(news_tokens).T).toarray().ravel()
    return _rank(scores, index.doc_ids, k, exclude_id)


def query_scores(index: NeighborIndex, news_tokens: Sequence[str]) -> np.ndarray:
    return (index.matrix @ index.vectorize(news_tokens).T).toarray().ravel()


def _rank(scores: np.ndarray, doc_ids: Sequence[str], k: int, exclude_id: str | None) -> list[str]:
    # lexsort: last key is primary; negate scores for descending order.
    # Rounding keeps float noise in the dot products from breaking exact ties.
    ids = np.asarray(doc_ids, dtype=object)
    order = np.lexsort((ids.astype(str), -np.round(scores, 12)))
    out = []
    for i in order:
        if doc_ids[i] == exclude_id:
            continue
        out.append(doc_ids[i])
        if len(out) == k:
            break
    return out


def gather_background(pairs, ids: Sequence[str]) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    """News and report token lists for ``ids``, in the given order.

    ``pairs`` is a sequence of ``NewsReportPair`` or an ``id -> pair`` mapping.
    """
    lookup = pairs if isinstance(pairs, dict) else {p.id: p for p in pairs}
    news, reports = [], []
    for i in ids:
        if i not in lookup:
            raise KeyError(f"unknown pair id {i!r}")
        news.append(lookup[i].news_tokens)
        reports.append(lookup[i].report_tokens)
    return news, reports
