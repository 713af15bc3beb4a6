"""Hybrid alignment loss: weighted directional (cosine), L1 and contrastive terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, UsageError
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    directional: float = 0.3
    l1: float = 0.3
    contrastive: float = 0.4

    def __post_init__(self):
        vals = (self.directional, self.l1, self.contrastive)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"loss weights must be finite and nonnegative, got {vals}")
        total = sum(vals)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"loss weights must sum to 1, got {total}")
        # snap small rounding drift onto the simplex
        object.__setattr__(self, "directional", self.directional / total)
        object.__setattr__(self, "l1", self.l1 / total)
        object.__setattr__(self, "contrastive", self.contrastive / total)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.directional, self.l1, self.contrastive)


@dataclass(frozen=True)
class BatchLossReport:
    directional: float
    l1: float
    contrastive: float
    total: float
    batch_size: int


def _check_pair(a: Tensor, t: Tensor) -> None:
    if a.shape != t.shape or a.data.ndim != 2:
        raise ConfigError(f"expected matching B x d inputs, got {a.shape} and {t.shape}")


def _check_unit(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise UsageError(f"{what} rows must be unit norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def directional_loss(a, t) -> Tensor:
    """Mean of 1 - cos(a_i, t_i) over matched unit rows."""
    a, t = nx.as_tensor(a), nx.as_tensor(t)
    _check_pair(a, t)
    _check_unit(a, "audio")
    _check_unit(t, "text")
    cos = nx.reduce_sum(nx.mul(a, t), axis=1)
    return nx.scale(nx.reduce_sum(nx.sub(np.ones(a.shape[0]), cos)), 1.0 / a.shape[0])


def l1_loss(a, t) -> Tensor:
    """Mean absolute difference over batch and dimensions."""
    a, t = nx.as_tensor(a), nx.as_tensor(t)
    _check_pair(a, t)
    return nx.reduce_mean(nx.absolute(nx.sub(a, t)))


def contrastive_loss(a, t, temperature: float | Tensor = 0.07) -> Tensor:
    """Symmetric in-batch cross-entropy on S = a t^T / temperature.

    ``temperature`` may be a tensor holding log(temperature) when it is learned.
    """
    a, t = nx.as_tensor(a), nx.as_tensor(t)
    _check_pair(a, t)
    sim = nx.matmul(a, nx.transpose(t, (1, 0)))
    if isinstance(temperature, Tensor):
        logits = nx.mul(sim, nx.exp(nx.scale(temperature, -1.0)))
    else:
        if not temperature > 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        logits = nx.scale(sim, 1.0 / temperature)
    b = a.shape[0]
    eye = np.eye(b)
    rows = nx.reduce_sum(nx.mask(nx.log_softmax(logits, axis=1), eye))
    cols = nx.reduce_sum(nx.mask(nx.log_softmax(logits, axis=0), eye))
    return nx.scale(nx.add(rows, cols), -0.5 / b)


def hybrid_loss(a, t, weights: LossWeights = LossWeights(), temperature: float | Tensor = 0.07):
    """Returns ``(total, report)``; ``total`` is a scalar tensor on the active tape."""
    a, t = nx.as_tensor(a), nx.as_tensor(t)
    parts = (directional_loss(a, t), l1_loss(a, t), contrastive_loss(a, t, temperature))
    total = None
    for w, part in zip(weights.as_tuple(), parts):
        term = nx.scale(part, w)
        total = term if total is None else nx.add(total, term)
    report = BatchLossReport(
        directional=parts[0].item(),
        l1=parts[1].item(),
        contrastive=parts[2].item(),
        total=total.item(),
        batch_size=a.shape[0],
    )
    return total, report
