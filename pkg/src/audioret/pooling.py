"""Attention pooling over chunk embeddings.

The relevance score is the scaled dot product g(h, q) = h.q / sqrt(d). With
``bilinear=True`` the query first passes through a learnable d x d matrix.
During training the query is the paired text vector, replaced by the learned
``q_pool`` with probability ``replace_prob``; at inference it is always ``q_pool``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import numerics as nx
from .errors import ConfigError, UsageError
from .numerics import Tensor


@dataclass
class PoolParams:
    q_pool: Tensor
    replace_prob: float = 0.1
    w_bilinear: Tensor | None = None

    def __post_init__(self):
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ConfigError(f"replace_prob must be in [0, 1], got {self.replace_prob}")

    @classmethod
    def init(cls, d_shared: int, replace_prob: float = 0.1, bilinear: bool = False, rng=None) -> "PoolParams":
        # zero query = uniform weights = mean pooling at step 0
        q = Tensor(np.zeros(d_shared), requires_grad=True, name="pool.q_pool")
        w = None
        if bilinear:
            w = Tensor(np.eye(d_shared), requires_grad=True, name="pool.w_bilinear")
        return cls(q, replace_prob, w)

    def tensors(self) -> list[Tensor]:
        return [self.q_pool] + ([self.w_bilinear] if self.w_bilinear is not None else [])


@dataclass
class PoolQuery:
    mode: Literal["text", "learned"]
    vector: Tensor = field(repr=False)


def _as_query_tensor(query) -> Tensor:
    if isinstance(query, PoolQuery):
        return query.vector
    return nx.as_tensor(query)


def attention_pool(chunks, query, valid: np.ndarray | None = None, w_bilinear: Tensor | None = None):
    """Pool ``chunks`` (m x d, or B x m x d) against ``query`` (d, or B x d).

    Returns ``(z, alpha)`` as tensors: z is (d,) or (B, d), alpha is (m,) or (B, m).
    ``valid`` (B x m bool) excludes padded chunks.
    """
    chunks = nx.as_tensor(chunks)
    q = _as_query_tensor(query)
    single = chunks.data.ndim == 2
    if single:
        chunks = nx.reshape(chunks, (1,) + chunks.shape)
        q = nx.reshape(q, (1, -1))
        if valid is not None:
            valid = np.asarray(valid)[None, :]
    b, m, d = chunks.shape
    if m == 0:
        raise UsageError("attention_pool needs at least one chunk")
    if w_bilinear is not None:
        q = nx.matmul(q, w_bilinear)
    scores = nx.reshape(nx.matmul(chunks, nx.reshape(q, (b, d, 1))), (b, m))
    scores = nx.scale(scores, 1.0 / math.sqrt(d))
    alpha = nx.softmax(scores, valid)
    z = nx.reshape(nx.matmul(nx.reshape(alpha, (b, 1, m)), chunks), (b, d))
    if single:
        return nx.reshape(z, (d,)), nx.reshape(alpha, (m,))
    return z, alpha


def mean_pool(seq, valid: np.ndarray | None = None) -> Tensor:
    """Masked mean over the position axis of a B x n x d batch (or n x d)."""
    seq = nx.as_tensor(seq)
    if seq.data.ndim == 2:
        n = seq.shape[0]
        return nx.reshape(nx.matmul(np.full((1, n), 1.0 / n), seq), (seq.shape[1],))
    b, n, _ = seq.shape
    w = np.ones((b, n)) if valid is None else np.asarray(valid, dtype=np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    return nx.reshape(nx.matmul(w[:, None, :], seq), (b, seq.shape[2]))


def draw_replacements(n: int, replace_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(replace_prob) draws, one per training pair."""
    if replace_prob <= 0.0:
        return np.zeros(n, dtype=bool)
    if replace_prob >= 1.0:
        return np.ones(n, dtype=bool)
    return rng.random(n) < replace_prob


def select_train_query(text_vec, params: PoolParams, rng: np.random.Generator) -> PoolQuery:
    if draw_replacements(1, params.replace_prob, rng)[0]:
        return PoolQuery("learned", params.q_pool)
    return PoolQuery("text", nx.as_tensor(text_vec))


def mix_queries(text_vecs: Tensor, q_pool: Tensor, replaced: np.ndarray) -> Tensor:
    """Per-row choice between the text query and ``q_pool`` (B x d), differentiable in both."""
    r = replaced.astype(np.float64)[:, None]
    return nx.add(nx.mask(text_vecs, 1.0 - r), nx.mul(q_pool, r))
