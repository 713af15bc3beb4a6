"""Embedding index, ranking metrics and the paired Wilcoxon signed-rank test.

Ranking ties are always broken by ascending id.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .errors import ConfigError, DataError, InsufficientData, UsageError

RelevanceMap = Mapping[Hashable, "set[Hashable] | frozenset[Hashable]"]
Rankings = Mapping[Hashable, Sequence[Hashable]]


@dataclass
class EmbeddingIndex:
    ids: list
    vectors: np.ndarray
    modality: str = ""
    _tiebreak: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = list(self.ids)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ConfigError(f"{len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("duplicate ids in index")
        if self.ids:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ConfigError("index rows must be L2-normalised")
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._tiebreak = np.empty(len(self.ids), dtype=np.int64)
        self._tiebreak[order] = np.arange(len(self.ids))

    @classmethod
    def build(cls, ids, vectors, modality: str = "") -> "EmbeddingIndex":
        v = np.asarray(vectors, dtype=np.float64)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        return cls(list(ids), v, modality)

    def __len__(self) -> int:
        return len(self.ids)

    def rank(self, scores: np.ndarray, k: int) -> np.ndarray:
        """Indices of the top-k rows for one score vector (descending, then ascending id)."""
        return np.lexsort((self._tiebreak, -scores))[:k]


def search(index: EmbeddingIndex, query_vec: np.ndarray, k: int) -> list[tuple[Hashable, float]]:
    q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise UsageError("query vector must be unit norm")
    if k > len(index):
        warnings.warn(f"k={k} exceeds index size {len(index)}; clamping", stacklevel=2)
        k = len(index)
    scores = index.vectors @ q
    return [(index.ids[i], float(scores[i])) for i in index.rank(scores, k)]


def rank_all(index: EmbeddingIndex, query_ids: Sequence, query_vecs: np.ndarray, k: int) -> dict:
    """Top-k id lists for a batch of (unit) queries."""
    k = min(k, len(index))
    scores = np.asarray(query_vecs) @ index.vectors.T
    return {qid: [index.ids[i] for i in index.rank(scores[r], k)] for r, qid in enumerate(query_ids)}


# ------------------------------------------------------------------ metrics

def _relevant(relevance: RelevanceMap, qid):
    if qid not in relevance:
        raise DataError(f"query {qid!r} has no relevance entry")
    rel = relevance[qid]
    if not rel:
        raise DataError(f"query {qid!r} has an empty relevant set")
    return rel


def recall_at_k(rankings: Rankings, relevance: RelevanceMap, k: int) -> float:
    """Fraction of queries with at least one relevant document in the top k."""
    if not rankings:
        raise DataError("no queries")
    hits = 0
    for qid, ranked in rankings.items():
        rel = _relevant(relevance, qid)
        hits += any(doc in rel for doc in list(ranked)[:k])
    return hits / len(rankings)


def map_at_k(rankings: Rankings, relevance: RelevanceMap, k: int = 10,
             normalizer: Literal["min", "all"] = "min") -> tuple[float, dict]:
    """Mean AP@k. AP@k = (1/min(R, k)) * sum_{r<=k} P@r * rel(r); ``normalizer="all"`` uses 1/R."""
    if not rankings:
        raise DataError("no queries")
    qids = list(rankings)
    hits = np.zeros((len(qids), k), dtype=bool)
    denom = np.zeros(len(qids))
    for row, qid in enumerate(qids):
        rel = _relevant(relevance, qid)
        top = list(rankings[qid])[:k]
        hits[row, : len(top)] = [doc in rel for doc in top]
        denom[row] = min(len(rel), k) if normalizer == "min" else len(rel)
    ap = kernels.average_precision(hits, denom)
    per_query = {qid: float(a) for qid, a in zip(qids, ap)}
    return float(np.mean(ap)), per_query


@dataclass
class MetricReport:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    map_at_10: float
    per_query_ap: dict = field(default_factory=dict)

    def row(self) -> tuple[float, float, float, float]:
        return (self.recall_at_1, self.recall_at_5, self.recall_at_10, self.map_at_10)


def metric_report(rankings: Rankings, relevance: RelevanceMap, normalizer: str = "min") -> MetricReport:
    m, per_query = map_at_k(rankings, relevance, 10, normalizer)
    return MetricReport(
        recall_at_k(rankings, relevance, 1),
        recall_at_k(rankings, relevance, 5),
        recall_at_k(rankings, relevance, 10),
        m,
        per_query,
    )


# ----------------------------------------------------------------- Wilcoxon

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: Literal["exact", "normal-approx"]
    w_plus: float = 0.0
    w_minus: float = 0.0


def wilcoxon_signed_rank(x: Iterable[float], y: Iterable[float], exact_max_n: int = 25) -> WilcoxonResult:
    """Two-sided paired signed-rank test.

    Zero differences are dropped, tied |differences| get mid-ranks. For n <= 25
    the p-value comes from the exact null distribution of W+ over all 2**n sign
    patterns (computed by dynamic programming on doubled ranks); above that a
    normal approximation with tie and continuity correction is used.
    """
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError("paired samples must have equal length")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise InsufficientData(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = kernels.signed_rank_null(doubled)
        tail = counts[: int(round(2.0 * stat)) + 1].sum() / 2.0 ** n
        p = min(1.0, 2.0 * tail)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t ** 3 - t)) / 48.0
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
        method = "normal-approx"
    p = max(p, np.finfo(float).tiny)
    return WilcoxonResult(stat, p, n, method, w_plus, w_minus)


def paired_scores(a: Mapping, b: Mapping) -> tuple[list[float], list[float]]:
    """Align two per-query score maps on their shared keys (sorted)."""
    keys = sorted(set(a) & set(b), key=str)
    if not keys:
        raise DataError("no shared query ids between reports")
    return [a[k] for k in keys], [b[k] for k in keys]
