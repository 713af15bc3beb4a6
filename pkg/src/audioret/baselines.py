"""Caption-based retrieval baselines: lexical overlap, BM25, semantic cosine,
plus the similarity-based caption filter."""
from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import EmptyCaptionSet, EmptyQuery
from .retrieval import EmbeddingIndex, search
from .text import TextDoc


def _ranked(ids: Sequence[Hashable], scores: Sequence[float], k: int) -> list[tuple[Hashable, float]]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:k]]


def _query_tokens(query: TextDoc) -> list[str]:
    if not query.tokens:
        raise EmptyQuery(f"query {query.id!r} is empty after stopword removal")
    return query.tokens


def lexical_search(query: TextDoc, corpus: Sequence[TextDoc], k: int = 10) -> list[tuple[Hashable, float]]:
    """Score = number of distinct query tokens present in the caption."""
    q = set(_query_tokens(query))
    scores = [float(len(q & set(doc.tokens))) for doc in corpus]
    return _ranked([d.id for d in corpus], scores, k)


class BM25Index:
    """Okapi BM25 with IDF = ln((N - df + 0.5) / (df + 0.5) + 1).

    Query tokens are summed with multiplicity.
    """

    def __init__(self, corpus: Sequence[TextDoc], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.ids = [d.id for d in corpus]
        self.tf = [Counter(d.tokens) for d in corpus]
        self.lengths = np.array([len(d.tokens) for d in corpus], dtype=np.float64)
        self.n_docs = len(corpus)
        self.avgdl = float(self.lengths.mean()) if self.n_docs else 0.0
        df: Counter = Counter()
        for tf in self.tf:
            df.update(tf.keys())
        self.df = dict(df)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, query: TextDoc) -> np.ndarray:
        tokens = _query_tokens(query)
        out = np.zeros(self.n_docs)
        avgdl = self.avgdl or 1.0
        for term in tokens:
            if term not in self.df:
                continue
            idf = self.idf(term)
            for i, tf in enumerate(self.tf):
                f = tf.get(term, 0)
                if f:
                    norm = self.k1 * (1.0 - self.b + self.b * self.lengths[i] / avgdl)
                    out[i] += idf * f * (self.k1 + 1.0) / (f + norm)
        return out

    def search(self, query: TextDoc, k: int = 10) -> list[tuple[Hashable, float]]:
        return _ranked(self.ids, list(self.scores(query)), k)


def bm25_search(query: TextDoc, corpus: Sequence[TextDoc], k: int = 10, k1: float = 1.2, b: float = 0.75):
    return BM25Index(corpus, k1, b).search(query, k)


def semantic_search(query: str, corpus: Sequence[TextDoc], embed: Callable[[str], np.ndarray],
                    k: int = 10) -> list[tuple[Hashable, float]]:
    """Cosine ranking of captions embedded with ``embed`` (same tie-break as index search)."""
    index = EmbeddingIndex.build([d.id for d in corpus], np.stack([embed(d.text) for d in corpus]), "text")
    q = np.asarray(embed(query), dtype=np.float64)
    return search(index, q / np.linalg.norm(q), min(k, len(index)))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def filter_captions(captions: Sequence[tuple[str, np.ndarray, np.ndarray]], top_k: int = 5,
                    min_cos: float = 0.35) -> tuple[str, list[tuple[str, float]]]:
    """Keep the top_k captions by cos(text_vec, audio_vec), then drop those below min_cos.

    Returns the retained texts joined by single spaces (rank order) and the
    retained (text, similarity) list.
    """
    scored = [(text, cosine(text_vec, audio_vec)) for text, audio_vec, text_vec in captions]
    scored.sort(key=lambda item: -item[1])
    kept = [(text, sim) for text, sim in scored[:top_k] if sim >= min_cos]
    if not kept:
        raise EmptyCaptionSet("every caption fell below the similarity threshold")
    return " ".join(text for text, _ in kept), kept
