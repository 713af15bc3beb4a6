"""Training loop, evaluation and ablation runner.

Config files are flat ``key = value`` text; ``#`` starts a comment. Every key of
:class:`TrainConfig` may appear at most once and unknown keys are rejected.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from . import numerics as nx
from .audio import SnrSpec
from .data import RetrievalData, noisy_sequences
from .errors import AudioRetError, ConfigError, DataError, NumericError
from .formats import config_hash, decode_checkpoint, encode_checkpoint
from .objective import LossWeights, hybrid_loss
from .refinement import RefinerConfig, RefinerParams, embed_batch, pad_batch, refine_batch
from .retrieval import EmbeddingIndex, MetricReport, metric_report, rank_all

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_patience: int = 10
    w_directional: float = 0.3
    w_l1: float = 0.3
    w_contrastive: float = 0.4
    temperature: float = 0.07
    learnable_temperature: bool = False
    replace_prob: float = 0.1
    seed: int = 0
    d_model: int = 64
    d_shared: int = 32
    n_heads: int = 8
    depth: int = 1
    dropout: float = 0.1
    pre_norm: bool = False
    projection: str = "transformer"
    pooling: str = "attention"
    bilinear_pool: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be a finite non-negative number, got {self.learning_rate}")
        if not 4 <= self.batch_size <= 128:
            raise ConfigError(f"batch_size must be in [4, 128], got {self.batch_size}")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs and early_stop_patience must be >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        self.loss_weights  # validates the simplex
        self.refiner()  # validates dimensions and variant names

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_directional, self.w_l1, self.w_contrastive)

    def refiner(self) -> RefinerConfig:
        return RefinerConfig(d_model=self.d_model, d_shared=self.d_shared, n_heads=self.n_heads, depth=self.depth,
                             dropout=self.dropout, pre_norm=self.pre_norm, projection=self.projection,
                             pooling=self.pooling, bilinear_pool=self.bilinear_pool,
                             replace_prob=self.replace_prob)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_overrides(cls, text.splitlines()))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(kind, raw: str, key: str):
    try:
        if kind in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_overrides(cls, lines: Sequence[str]) -> dict:
    kinds = {f.name: f.type for f in fields(cls)}
    out: dict = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(kinds[key], raw, key)
    return out


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[nx.Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in the given (fixed) order. Gradients are read from ``.grad``."""
    for p in params:
        if p.grad is None:
            raise NumericError(f"no gradient for {p.name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {p.name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        updated = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(updated)):
            raise NumericError(f"non-finite update for {p.name} at step {t}")
        p.data = updated


# ------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: TrainConfig
    params: RefinerParams
    adam: AdamState
    epoch: int
    val_map: float

    @property
    def config_hash(self) -> str:
        return config_hash(asdict(self.config))

    def to_bytes(self) -> bytes:
        tensors = {f"param/{k}": v for k, v in self.params.state().items()}
        names = [n for n, _ in self.params.named_tensors()]
        for name in names:
            if name in self.adam.m:
                tensors[f"adam_m/{name}"] = self.adam.m[name]
                tensors[f"adam_v/{name}"] = self.adam.v[name]
        meta = {"config": asdict(self.config), "config_hash": self.config_hash, "step": self.adam.step,
                "epoch": self.epoch, "val_map": self.val_map}
        return encode_checkpoint(tensors, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors, meta = decode_checkpoint(data)
        config = TrainConfig(**meta["config"])
        if config_hash(asdict(config)) != meta["config_hash"]:
            raise ConfigError("checkpoint config hash mismatch")
        params = _init_params(config)
        params.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        adam = AdamState(step=int(meta["step"]))
        for k, v in tensors.items():
            kind, _, name = k.partition("/")
            if kind == "adam_m":
                adam.m[name] = v.copy()
            elif kind == "adam_v":
                adam.v[name] = v.copy()
        return cls(config, params, adam, int(meta["epoch"]), float(meta["val_map"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _init_params(config: TrainConfig) -> RefinerParams:
    return RefinerParams.init(config.refiner(), config.seed,
                              config.temperature if config.learnable_temperature else None)


# ----------------------------------------------------------------- training

STEP_LOG_HEADER = ("step", "directional", "l1", "contrastive", "total")
EPOCH_LOG_HEADER = ("epoch", "train_loss", "val_map10", "best_val_map10", "best_epoch")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    step_log: list[tuple]
    epoch_log: list[tuple]
    final_params: RefinerParams

    @property
    def params(self) -> RefinerParams:
        return self.checkpoint.params


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()  # a single pair gives no in-batch negatives
    return out


def train(config: TrainConfig, data: RetrievalData, resume: Checkpoint | None = None,
          on_epoch: Callable[[tuple], None] | None = None) -> TrainResult:
    """Train on ``data``'s train split, early-stopping on validation mAP@10 (mean of both directions).

    Shuffling, dropout and query replacement draw from RNG streams keyed by
    (seed, epoch) and (seed, step), so a run resumed from a checkpoint continues
    exactly as the uninterrupted run would have.
    """
    train_set = data.split_view("train")
    val_set = data.split_view("val")
    if len(train_set.pairs) < 2:
        raise DataError("training split needs at least 2 pairs")
    if not val_set.audio or not val_set.text:
        raise DataError("validation split is empty")
    if train_set.d_model != config.d_model:
        raise ConfigError(f"data d_model {train_set.d_model} != config d_model {config.d_model}")

    if resume is not None:
        if resume.config_hash != config_hash(asdict(config)):
            raise ConfigError("resume checkpoint was trained with a different config")
        params = copy.deepcopy(resume.params)
        adam = copy.deepcopy(resume.adam)
        start_epoch = resume.epoch + 1
        best = copy.deepcopy(resume)
    else:
        params = _init_params(config)
        adam = AdamState()
        start_epoch = 1
        best = Checkpoint(config, copy.deepcopy(params), copy.deepcopy(adam), 0,
                          validation_map(params, val_set))

    weights = config.loss_weights
    trainable = params.tensors()
    temperature = params.log_temperature if params.log_temperature is not None else config.temperature
    audio_seqs = [train_set.audio[a].seq for a, _ in train_set.pairs]
    text_seqs = [train_set.text[t].seq for _, t in train_set.pairs]
    step_log: list[tuple] = []
    epoch_log: list[tuple] = []
    stale = 0
    for epoch in range(start_epoch, config.max_epochs + 1):
        losses = []
        for idx in _batches(len(audio_seqs), config.batch_size, nx.make_rng(config.seed, 2, epoch)):
            rng = nx.make_rng(config.seed, 3, adam.step + 1)
            ax, av = pad_batch([audio_seqs[i] for i in idx])
            tx, tv = pad_batch([text_seqs[i] for i in idx])
            for p in trainable:
                p.grad = None
            with nx.Tape() as tape:
                out = refine_batch(ax, av, tx, tv, params, rng, "train")
                total, report = hybrid_loss(out.audio, out.text, weights, temperature)
                if not math.isfinite(report.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {adam.step + 1}")
                tape.backward(total)
            for p in trainable:
                if p.grad is None:  # not part of this variant's graph (e.g. q_pool under mean pooling)
                    p.grad = np.zeros_like(p.data)
            adam_step(trainable, adam, config.learning_rate)
            step_log.append((adam.step, report.directional, report.l1, report.contrastive, report.total))
            losses.append(report.total)
        val = validation_map(params, val_set)
        if val > best.val_map:
            best = Checkpoint(config, copy.deepcopy(params), copy.deepcopy(adam), epoch, val)
            stale = 0
        else:
            stale += 1
        row = (epoch, float(np.mean(losses)), val, best.val_map, best.epoch)
        epoch_log.append(row)
        log.info("epoch %d loss %.4f val mAP@10 %.4f (best %.4f @ %d)", *row)
        if on_epoch:
            on_epoch(row)
        if stale >= config.early_stop_patience:
            break
    return TrainResult(best, step_log, epoch_log, params)


# --------------------------------------------------------------- evaluation

def embed_audio(params: RefinerParams, seqs: Sequence[np.ndarray], batch: int = 64, return_alpha: bool = False):
    """Inference-path audio embeddings (and pooling weights) for variable-length chunk sequences."""
    vecs, alphas = [], []
    for i in range(0, len(seqs), batch):
        part = list(seqs[i : i + batch])
        x, valid = pad_batch(part)
        v, a = embed_batch(x, valid, "audio", params, return_alpha=True)
        vecs.append(v)
        alphas.extend(a[j, : s.shape[0]] for j, s in enumerate(part))
    out = np.concatenate(vecs)
    return (out, alphas) if return_alpha else out


def embed_text(params: RefinerParams, seqs: Sequence[np.ndarray], batch: int = 64) -> np.ndarray:
    vecs = []
    for i in range(0, len(seqs), batch):
        x, valid = pad_batch(list(seqs[i : i + batch]))
        vecs.append(embed_batch(x, valid, "text", params))
    return np.concatenate(vecs)


@dataclass
class EvalResult:
    report: MetricReport
    direction: str
    attention: dict | None = None


def evaluate(params: RefinerParams, data: RetrievalData, direction: Literal["a2t", "t2a"] = "a2t",
             noise: SnrSpec | None = None, dump_attention: bool = False,
             audio_seqs: Sequence[np.ndarray] | None = None) -> EvalResult:
    """Index both modalities through the inference path and score ``direction`` retrieval."""
    if direction not in ("a2t", "t2a"):
        raise ConfigError(f"direction must be a2t or t2a, got {direction!r}")
    if not data.audio or not data.text:
        raise DataError("nothing to evaluate")
    if audio_seqs is None:
        audio_seqs = noisy_sequences(data, noise) if noise is not None else [a.seq for a in data.audio]
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        a_vecs, alphas = embed_audio(params, audio_seqs, return_alpha=True)
        t_vecs = embed_text(params, [t.seq for t in data.text])
    if not (np.all(np.isfinite(a_vecs)) and np.all(np.isfinite(t_vecs))):
        raise NumericError("non-finite embeddings; parameters have diverged")
    a_ids = [a.id for a in data.audio]
    t_ids = [t.id for t in data.text]
    if direction == "a2t":
        rankings = rank_all(EmbeddingIndex(t_ids, t_vecs, "text"), a_ids, a_vecs, 10)
    else:
        rankings = rank_all(EmbeddingIndex(a_ids, a_vecs, "audio"), t_ids, t_vecs, 10)
    report = metric_report(rankings, data.relevance(direction))
    attention = {aid: alpha for aid, alpha in zip(a_ids, alphas)} if dump_attention else None
    return EvalResult(report, direction, attention)


def validation_map(params: RefinerParams, data: RetrievalData) -> float:
    a2t = evaluate(params, data, "a2t").report.map_at_10
    t2a = evaluate(params, data, "t2a").report.map_at_10
    return 0.5 * (a2t + t2a)


# ------------------------------------------------------------------ ablation

WEIGHT_GRID = ["0/0/1", "0.1/0.2/0.7", "0.2/0.3/0.5", "0.2/0.1/0.7", "0.3/0.3/0.4", "0.4/0.4/0.2"]
BATCH_GRID = ["4", "8", "16", "32", "64"]
PROJECTION_GRID = ["linear", "transformer"]
LOSS_GRID = ["contrastive", "hybrid"]
POOLING_GRID = ["mean", "attention"]

AXES: dict[str, list[str]] = {
    "loss-weights": WEIGHT_GRID,
    "batch-size": BATCH_GRID,
    "projection-type": PROJECTION_GRID,
    "loss-type": LOSS_GRID,
    "pooling": POOLING_GRID,
}

ABLATION_HEADER = ("axis", "value",
                   "a2t_R@1", "a2t_R@5", "a2t_R@10", "a2t_mAP@10",
                   "t2a_R@1", "t2a_R@5", "t2a_R@10", "t2a_mAP@10", "status")


def apply_axis(base: TrainConfig, axis: str, value: str) -> TrainConfig:
    value = value.strip()
    if axis == "loss-weights":
        parts = [float(p) for p in value.replace(",", "/").split("/")]
        if len(parts) != 3:
            raise ConfigError(f"loss weights need three components, got {value!r}")
        return replace(base, w_directional=parts[0], w_l1=parts[1], w_contrastive=parts[2])
    if axis == "batch-size":
        return replace(base, batch_size=int(value))
    if axis == "projection-type":
        return replace(base, projection=value)
    if axis == "loss-type":
        if value == "contrastive":
            return replace(base, w_directional=0.0, w_l1=0.0, w_contrastive=1.0)
        if value == "hybrid":
            return base
        raise ConfigError(f"unknown loss type {value!r}")
    if axis == "pooling":
        return replace(base, pooling=value)
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")


def ablate(base: TrainConfig, data: RetrievalData, axis: str, grid: Sequence[str] | None = None,
           split: str = "test") -> list[tuple]:
    """One train + evaluate per grid value with the base seed; failures are recorded, not raised."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    grid = list(grid) if grid is not None else AXES[axis]
    held_out = data.split_view(split)
    rows = []
    for value in grid:
        try:
            cfg = apply_axis(base, axis, value)
            result = train(cfg, data)
            a2t = evaluate(result.params, held_out, "a2t").report
            t2a = evaluate(result.params, held_out, "t2a").report
            rows.append((axis, value, *a2t.row(), *t2a.row(), "ok"))
        except (AudioRetError, ValueError, FloatingPointError) as exc:
            log.warning("ablation %s=%s failed: %s", axis, value, exc)
            rows.append((axis, value, *([""] * 8), f"error: {type(exc).__name__}: {exc}"))
    return rows
