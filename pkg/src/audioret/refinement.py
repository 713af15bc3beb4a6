"""Cross-modal embedding refinement.

Per modality: a residual transformer block (H = MHA(X) + X, Z = FFN(H) + H,
no layer norm unless ``pre_norm``), then an affine map into the shared space
(E = Z W + b). During training only, the two projected sequences attend to each
other and the attention output is added back residually, so zero attention
recovers the independent (dual-encoder) path used at inference.

Batched functions take padded arrays of shape (B, n, d) with a (B, n) bool
validity mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Literal

import numpy as np

from . import numerics as nx
from .errors import ConfigError, UsageError
from .numerics import Tensor
from .pooling import PoolParams, attention_pool, draw_replacements, mean_pool, mix_queries

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class RefinerConfig:
    d_model: int = 64
    d_shared: int = 32
    n_heads: int = 8
    depth: int = 1
    dropout: float = 0.1
    pre_norm: bool = False
    projection: Literal["transformer", "linear"] = "transformer"
    pooling: Literal["attention", "mean"] = "attention"
    bilinear_pool: bool = False
    replace_prob: float = 0.1

    def __post_init__(self):
        if self.d_model <= 0 or self.d_shared <= 0:
            raise ConfigError("d_model and d_shared must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.projection not in ("transformer", "linear"):
            raise ConfigError(f"unknown projection type {self.projection!r}")
        if self.pooling not in ("attention", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")


def _uniform(rng, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class TransformerBlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    n_heads: int = 8
    dropout: float = 0.1
    ln1_gain: Tensor | None = None
    ln1_bias: Tensor | None = None
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None

    @classmethod
    def init(cls, d_model: int, rng, prefix: str, n_heads: int = 8, dropout: float = 0.1, pre_norm: bool = False):
        d, h = d_model, 4 * d_model
        block = cls(
            wq=_uniform(rng, d, (d, d), f"{prefix}.wq"),
            wk=_uniform(rng, d, (d, d), f"{prefix}.wk"),
            wv=_uniform(rng, d, (d, d), f"{prefix}.wv"),
            wo=_uniform(rng, d, (d, d), f"{prefix}.wo"),
            w1=_uniform(rng, d, (d, h), f"{prefix}.w1"),
            b1=_zeros((h,), f"{prefix}.b1"),
            w2=_uniform(rng, h, (h, d), f"{prefix}.w2"),
            b2=_zeros((d,), f"{prefix}.b2"),
            n_heads=n_heads,
            dropout=dropout,
        )
        if pre_norm:
            block.ln1_gain = Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln1_gain")
            block.ln1_bias = _zeros((d,), f"{prefix}.ln1_bias")
            block.ln2_gain = Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln2_gain")
            block.ln2_bias = _zeros((d,), f"{prefix}.ln2_bias")
        return block

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> list[Tensor]:
        out = [self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2]
        if self.ln1_gain is not None:
            out += [self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]
        return out


@dataclass
class SharedProjectionParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_model: int, d_shared: int, rng, prefix: str):
        return cls(_uniform(rng, d_model, (d_model, d_shared), f"{prefix}.w"), _zeros((d_shared,), f"{prefix}.b"))

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class CrossAttentionParams:
    """Audio-to-text triple (wq_a, wk_t, wv_t) and text-to-audio triple (wq_t, wk_a, wv_a)."""

    wq_a: Tensor
    wk_t: Tensor
    wv_t: Tensor
    wq_t: Tensor
    wk_a: Tensor
    wv_a: Tensor

    @classmethod
    def init(cls, d_shared: int, rng, zero_values: bool = True):
        """Value weights start at zero so training begins on the dual-encoder (inference) path."""
        names = [f.name for f in fields(cls)]
        params = cls(**{n: _uniform(rng, d_shared, (d_shared, d_shared), f"cross.{n}") for n in names})
        if zero_values:
            params.wv_t.data[:] = 0.0
            params.wv_a.data[:] = 0.0
        return params

    def tensors(self) -> list[Tensor]:
        return [self.wq_a, self.wk_t, self.wv_t, self.wq_t, self.wk_a, self.wv_a]


@dataclass
class RefinerParams:
    config: RefinerConfig
    audio_blocks: list[TransformerBlockParams]
    text_blocks: list[TransformerBlockParams]
    audio_proj: SharedProjectionParams
    text_proj: SharedProjectionParams
    cross: CrossAttentionParams
    pool: PoolParams
    log_temperature: Tensor | None = field(default=None)

    @classmethod
    def init(cls, config: RefinerConfig, seed: int = 0, learnable_temperature: float | None = None):
        """Fan-in uniform weights, zero biases, zero pooling query."""
        rng = nx.make_rng(seed, 1)
        kw = dict(n_heads=config.n_heads, dropout=config.dropout, pre_norm=config.pre_norm)
        audio_blocks, text_blocks = [], []
        if config.projection == "transformer":
            audio_blocks = [TransformerBlockParams.init(config.d_model, rng, f"audio.block{i}", **kw) for i in range(config.depth)]
            text_blocks = [TransformerBlockParams.init(config.d_model, rng, f"text.block{i}", **kw) for i in range(config.depth)]
        params = cls(
            config=config,
            audio_blocks=audio_blocks,
            text_blocks=text_blocks,
            audio_proj=SharedProjectionParams.init(config.d_model, config.d_shared, rng, "audio.proj"),
            text_proj=SharedProjectionParams.init(config.d_model, config.d_shared, rng, "text.proj"),
            cross=CrossAttentionParams.init(config.d_shared, rng),
            pool=PoolParams.init(config.d_shared, config.replace_prob, config.bilinear_pool),
        )
        if learnable_temperature is not None:
            params.log_temperature = Tensor(np.array([math.log(learnable_temperature)]), requires_grad=True,
                                            name="log_temperature")
        return params

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """All learnable tensors in a fixed order (optimizer and checkpoint order)."""
        groups = [b.tensors() for b in self.audio_blocks] + [b.tensors() for b in self.text_blocks]
        groups += [self.audio_proj.tensors(), self.text_proj.tensors(), self.cross.tensors(), self.pool.tensors()]
        if self.log_temperature is not None:
            groups.append([self.log_temperature])
        for group in groups:
            for t in group:
                yield t.name, t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ConfigError(f"parameter names do not match checkpoint: {missing[:5]}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)


# ----------------------------------------------------------------- blocks

def _batched(x, valid):
    x = nx.as_tensor(x)
    single = x.data.ndim == 2
    if single:
        x = nx.reshape(x, (1,) + x.shape)
        valid = None if valid is None else np.asarray(valid)[None]
    if valid is None:
        valid = np.ones(x.shape[:2], dtype=bool)
    return x, np.asarray(valid, dtype=bool), single


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return nx.reshape(t, t.shape[1:]) if single else t


def multi_head_attention(x: Tensor, params: TransformerBlockParams, valid: np.ndarray) -> Tensor:
    b, n, d = x.shape
    h = params.n_heads
    dh = d // h

    def heads(w):
        return nx.transpose(nx.reshape(nx.matmul(x, w), (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(params.wq), heads(params.wk), heads(params.wv)
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = nx.softmax(logits, valid[:, None, None, :])
    o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return nx.matmul(o, params.wo)


def feed_forward(x: Tensor, params: TransformerBlockParams) -> Tensor:
    hidden = nx.gelu(nx.add(nx.matmul(x, params.w1), params.b1))
    return nx.add(nx.matmul(hidden, params.w2), params.b2)


def transformer_project(x, params: TransformerBlockParams, mode: Mode = "infer", rng=None,
                        valid: np.ndarray | None = None) -> Tensor:
    """One residual encoder block, dropout after each sublayer in train mode."""
    x, valid, single = _batched(x, valid)
    if x.shape[-1] != params.d_model:
        raise ConfigError(f"input dim {x.shape[-1]} != d_model {params.d_model}")
    if x.shape[1] < 1:
        raise UsageError("transformer_project needs n >= 1")
    train = mode == "train"
    pre = params.ln1_gain is not None
    inp = nx.layer_norm(x, params.ln1_gain, params.ln1_bias) if pre else x
    h = nx.add(nx.dropout(multi_head_attention(inp, params, valid), params.dropout, train, rng), x)
    inp = nx.layer_norm(h, params.ln2_gain, params.ln2_bias) if pre else h
    z = nx.add(nx.dropout(feed_forward(inp, params), params.dropout, train, rng), h)
    return _unbatch(z, single)


def linear_project(z, params: SharedProjectionParams) -> Tensor:
    z = nx.as_tensor(z)
    if z.shape[-1] != params.w.shape[0]:
        raise ConfigError(f"input dim {z.shape[-1]} != projection rows {params.w.shape[0]}")
    return nx.add(nx.matmul(z, params.w), params.b)


def _attend(queries: Tensor, keys_from: Tensor, wq, wk, wv, key_valid: np.ndarray):
    d_k = wk.shape[1]
    q = nx.matmul(queries, wq)
    k = nx.matmul(keys_from, wk)
    v = nx.matmul(keys_from, wv)
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_k))
    att = nx.softmax(logits, key_valid[:, None, :])
    return nx.matmul(att, v), att


def cross_attend(e_a, e_t, params: CrossAttentionParams, a_valid=None, t_valid=None, return_weights=False):
    """Bidirectional cross-attention with residual integration.

    Returns ``(a_refined, t_refined)`` and, if asked, the two attention matrices.
    """
    e_a, a_valid, single = _batched(e_a, a_valid)
    e_t, t_valid, _ = _batched(e_t, t_valid)
    if e_a.shape[1] == 0 or e_t.shape[1] == 0:
        raise UsageError("cross_attend needs nonempty sequences")
    att_a, w_at = _attend(e_a, e_t, params.wq_a, params.wk_t, params.wv_t, t_valid)
    att_t, w_ta = _attend(e_t, e_a, params.wq_t, params.wk_a, params.wv_a, a_valid)
    a_ref = _unbatch(nx.add(e_a, att_a), single)
    t_ref = _unbatch(nx.add(e_t, att_t), single)
    if return_weights:
        return a_ref, t_ref, _unbatch(w_at, single), _unbatch(w_ta, single)
    return a_ref, t_ref


def encode_sequence(x, blocks: list[TransformerBlockParams], proj: SharedProjectionParams,
                    mode: Mode = "infer", rng=None, valid=None) -> Tensor:
    """Transformer block(s) then the shared-space projection (B x n x d_shared)."""
    x, valid, single = _batched(x, valid)
    for block in blocks:
        x = transformer_project(x, block, mode, rng, valid)
    return _unbatch(linear_project(x, proj), single)


# --------------------------------------------------------------- pipelines

@dataclass
class RefineOutput:
    audio: Tensor
    text: Tensor
    alpha: Tensor
    replaced: np.ndarray


def refine_batch(audio_x, audio_valid, text_x, text_valid, params: RefinerParams,
                 rng: np.random.Generator, mode: Mode = "train") -> RefineOutput:
    """Training path for a padded batch of pairs: B x d_shared unit vectors per side.

    rng draws happen in a fixed order: audio dropout, text dropout, query replacement.
    """
    cfg = params.config
    audio_x, audio_valid, _ = _batched(audio_x, audio_valid)
    text_x, text_valid, _ = _batched(text_x, text_valid)
    e_a = encode_sequence(audio_x, params.audio_blocks, params.audio_proj, mode, rng, audio_valid)
    e_t = encode_sequence(text_x, params.text_blocks, params.text_proj, mode, rng, text_valid)
    text_query = mean_pool(e_t, text_valid)
    a_ref, t_ref = cross_attend(e_a, e_t, params.cross, audio_valid, text_valid)
    b = audio_x.shape[0]
    replaced = draw_replacements(b, params.pool.replace_prob, rng)
    if cfg.pooling == "attention":
        query = mix_queries(text_query, params.pool.q_pool, replaced)
        pooled, alpha = attention_pool(a_ref, query, audio_valid, params.pool.w_bilinear)
    else:
        pooled = mean_pool(a_ref, audio_valid)
        alpha = nx.Tensor(audio_valid / audio_valid.sum(axis=1, keepdims=True))
    text_vec = mean_pool(t_ref, text_valid)
    return RefineOutput(nx.l2_normalize(pooled), nx.l2_normalize(text_vec), alpha, replaced)


def refine_pair(audio_seq, text_seq, params: RefinerParams, rng: np.random.Generator):
    """Single-pair training path; returns ``(audio_vec, text_vec)`` as (d_shared,) tensors."""
    out = refine_batch(audio_seq, None, text_seq, None, params, rng, "train")
    d = params.config.d_shared
    return nx.reshape(out.audio, (d,)), nx.reshape(out.text, (d,))


def embed_batch(seqs, valid, modality: Literal["audio", "text"], params: RefinerParams,
                return_alpha: bool = False):
    """Inference path: no cross-attention, no dropout. Returns numpy (B x d_shared)."""
    seqs, valid, _ = _batched(seqs, valid)
    if seqs.shape[1] == 0 or not valid.any(axis=1).all():
        raise UsageError("embed needs nonempty sequences")
    if modality == "audio":
        e = encode_sequence(seqs, params.audio_blocks, params.audio_proj, "infer", None, valid)
        if params.config.pooling == "attention":
            q = np.broadcast_to(params.pool.q_pool.data, (seqs.shape[0], params.config.d_shared))
            pooled, alpha = attention_pool(e, q, valid, params.pool.w_bilinear)
            alpha = alpha.data
        else:
            pooled = mean_pool(e, valid)
            alpha = valid / valid.sum(axis=1, keepdims=True)
    elif modality == "text":
        e = encode_sequence(seqs, params.text_blocks, params.text_proj, "infer", None, valid)
        pooled = mean_pool(e, valid)
        alpha = None
    else:
        raise ConfigError(f"unknown modality {modality!r}")
    vec = nx.l2_normalize(pooled).data
    return (vec, alpha) if return_alpha else vec


def embed_single(seq, modality: Literal["audio", "text"], params: RefinerParams) -> np.ndarray:
    seq = np.asarray(seq.data if isinstance(seq, Tensor) else seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise UsageError("embed_single needs a nonempty n x d_model sequence")
    return embed_batch(seq[None], None, modality, params)[0]


def pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (n_i x d) sequences into zero-padded (B x n_max x d) plus a mask."""
    if not seqs:
        raise UsageError("empty batch")
    n_max = max(s.shape[0] for s in seqs)
    d = seqs[0].shape[1]
    out = np.zeros((len(seqs), n_max, d))
    valid = np.zeros((len(seqs), n_max), dtype=bool)
    for i, s in enumerate(seqs):
        if s.shape[0] == 0:
            raise UsageError(f"sequence {i} is empty")
        out[i, : s.shape[0]] = s
        valid[i, : s.shape[0]] = True
    return out, valid
