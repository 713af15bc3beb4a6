"""Datasets: a synthetic audio-text benchmark and JSONL manifests.

Synthetic construction. Every class has a latent vector on the unit sphere.
A clip of that class is a sequence of segments separated by short (kept) or
long (excised) silences. "Event" segments are stationary noise whose log-power
spectral envelope is a fixed smooth linear image of the (perturbed) latent;
"background" segments use one of a few class-independent envelopes. A caption
is a handful of token vectors near another linear image of the latent, mixed
with filler tokens shared by all captions. Perturbations are Gaussian with norm
about ``sigma`` relative to the unit latent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .audio import PreprocessConfig, SnrSpec, ToyEncoder, Waveform, encode_clip, read_wav
from .errors import ConfigError, DataError
from .formats import read_embeddings
from .numerics import make_rng
from .text import ToyTextEncoder

Split = Literal["train", "val", "test"]


@dataclass
class AudioItem:
    id: int
    group: int
    split: str
    seq: np.ndarray
    source: Callable[[], Waveform] | None = field(default=None, repr=False)


@dataclass
class TextItem:
    id: int
    group: int
    split: str
    seq: np.ndarray
    text: str = ""


@dataclass
class RetrievalData:
    """Audio and text items; an audio and a text item are relevant iff they share ``group``."""

    audio: list[AudioItem]
    text: list[TextItem]
    pairs: list[tuple[int, int]]  # (audio index, text index)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoder: object = None

    def split_view(self, split: str) -> "RetrievalData":
        a_keep = [i for i, a in enumerate(self.audio) if a.split == split]
        t_keep = [i for i, t in enumerate(self.text) if t.split == split]
        a_map = {old: new for new, old in enumerate(a_keep)}
        t_map = {old: new for new, old in enumerate(t_keep)}
        pairs = [(a_map[a], t_map[t]) for a, t in self.pairs if a in a_map and t in t_map]
        return RetrievalData([self.audio[i] for i in a_keep], [self.text[i] for i in t_keep], pairs,
                             self.preprocess, self.encoder)

    @property
    def d_model(self) -> int:
        return int(self.audio[0].seq.shape[1])

    def relevance(self, direction: Literal["a2t", "t2a"]) -> dict[int, set[int]]:
        by_group_text: dict[int, set[int]] = {}
        for t in self.text:
            by_group_text.setdefault(t.group, set()).add(t.id)
        by_group_audio: dict[int, set[int]] = {}
        for a in self.audio:
            by_group_audio.setdefault(a.group, set()).add(a.id)
        if direction == "a2t":
            return {a.id: by_group_text.get(a.group, set()) for a in self.audio}
        return {t.id: by_group_audio.get(t.group, set()) for t in self.text}


# ------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 32
    pairs_per_class: int = 8
    latent_dim: int = 16
    audio_sigma: float = 0.1
    text_sigma: float = 0.1
    min_duration_s: float = 6.0
    max_duration_s: float = 34.0
    sample_rate: int = 4000
    d_model: int = 64
    spectral_contrast: float = 2.0
    background_min: float = 0.1
    background_max: float = 0.3
    envelope_jitter: float = 0.2
    level_spread: float = 1.25
    n_backgrounds: int = 4
    seed: int = 0

    _ALIASES = {"classes": "num_classes", "pairs": "pairs_per_class", "sigma": None, "sr": "sample_rate"}

    def __post_init__(self):
        if self.num_classes < 2 or self.pairs_per_class < 3:
            raise ConfigError("need >= 2 classes and >= 3 pairs per class (train/val/test)")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ConfigError("bad clip duration range")

    @classmethod
    def parse(cls, text: str) -> "SyntheticDatasetSpec":
        """Parse ``synthetic:classes=32,pairs=8,sigma=0.1,seed=0`` (prefix optional)."""
        body = text.split(":", 1)[1] if text.startswith("synthetic") else text
        kw: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for part in filter(None, (p.strip() for p in body.split(","))):
            if "=" not in part:
                raise ConfigError(f"bad synthetic spec entry {part!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            if key == "sigma":
                kw["audio_sigma"] = kw["text_sigma"] = float(value)
                continue
            key = cls._ALIASES.get(key, key)
            if key not in types:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
            kw[key] = int(value) if types[key] in ("int", int) else float(value)
        return cls(**kw)


def _smooth_basis(rng, rows: int, cols: int, width: float) -> np.ndarray:
    x = np.arange(rows)
    kernel = np.exp(-0.5 * ((x[:, None] - x[None, :]) / width) ** 2)
    basis = kernel @ rng.standard_normal((rows, cols))
    return basis / basis.std(axis=0, keepdims=True)


def colored_noise(n: int, log_power: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS stationary noise whose band log-power follows ``log_power`` (64 bands)."""
    nb = n // 2 + 1
    centres = np.linspace(0.0, 1.0, log_power.size + 2)[1:-1]
    lp = np.interp(np.linspace(0.0, 1.0, nb), centres, log_power)
    spec = (rng.standard_normal(nb) + 1j * rng.standard_normal(nb)) * np.exp(lp / 2.0)
    x = np.fft.irfft(spec, n)
    return x / math.sqrt(np.mean(x * x))


class SyntheticCorpus:
    """Deterministic generator; waveforms are re-synthesised on demand from (seed, clip index)."""

    def __init__(self, spec: SyntheticDatasetSpec):
        self.spec = spec
        rng = make_rng(spec.seed, 0xC1A55)
        z = rng.standard_normal((spec.num_classes, spec.latent_dim))
        self.latents = z / np.linalg.norm(z, axis=1, keepdims=True)
        self.audio_map = _smooth_basis(rng, 64, spec.latent_dim, 2.5) / math.sqrt(spec.latent_dim)
        self.text_map = rng.standard_normal((spec.latent_dim, spec.d_model)) * (2.0 / math.sqrt(spec.latent_dim))
        bg = _smooth_basis(rng, 64, spec.n_backgrounds, 6.0).T
        slope = np.linspace(1.0, -2.0, 64)
        self.backgrounds = slope[None, :] + 0.8 * bg
        self.fillers = rng.standard_normal((12, spec.d_model)) * (2.0 / math.sqrt(spec.d_model))
        n = spec.num_classes * spec.pairs_per_class
        self.labels = np.repeat(np.arange(spec.num_classes), spec.pairs_per_class)
        self.splits = self._assign_splits(rng)
        self.n_items = n

    def _assign_splits(self, rng) -> list[str]:
        ppc = self.spec.pairs_per_class
        n_test = max(1, round(0.25 * ppc))
        n_val = max(1, round(0.125 * ppc))
        splits = [""] * (self.spec.num_classes * ppc)
        for c in range(self.spec.num_classes):
            order = rng.permutation(ppc)
            for rank, j in enumerate(order):
                kind = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
                splits[c * ppc + j] = kind
        return splits

    def _perturbed(self, c: int, sigma: float, rng) -> np.ndarray:
        return self.latents[c] + sigma * rng.standard_normal(self.spec.latent_dim) / math.sqrt(self.spec.latent_dim)

    def waveform(self, i: int) -> Waveform:
        spec = self.spec
        rng = make_rng(spec.seed, 0xA0D, i)
        sr = spec.sample_rate
        latent = self._perturbed(int(self.labels[i]), spec.audio_sigma, rng)
        envelope = spec.spectral_contrast * (self.audio_map @ latent) * math.sqrt(spec.latent_dim)
        target = rng.uniform(spec.min_duration_s, spec.max_duration_s)
        level = 0.1 * spec.level_spread ** rng.uniform(-1.0, 1.0)
        pieces: list[np.ndarray] = []
        total = 0.0
        event_done = False
        is_event = rng.random() < 0.6
        while total < target or not event_done:
            if pieces:
                gap = rng.uniform(1.2, 2.5) if rng.random() < 0.3 else rng.uniform(0.1, 0.6)
                pieces.append(1e-5 * rng.standard_normal(int(gap * sr)))
            if is_event:
                dur = rng.uniform(3.0, 8.0)
                env = envelope + spec.envelope_jitter * rng.standard_normal(64)
                amp = level
                event_done = True
            else:
                dur = rng.uniform(2.0, 6.0)
                env = self.backgrounds[rng.integers(spec.n_backgrounds)] + spec.envelope_jitter * rng.standard_normal(64)
                amp = level * rng.uniform(self.spec.background_min, self.spec.background_max)
            pieces.append(amp * colored_noise(int(dur * sr), env, rng))
            total += dur
            is_event = not is_event if rng.random() < 0.7 else is_event
        return Waveform(np.clip(np.concatenate(pieces), -1.0, 1.0), sr)

    def caption_tokens(self, i: int) -> np.ndarray:
        spec = self.spec
        rng = make_rng(spec.seed, 0x7E7, i)
        c = int(self.labels[i])
        n_content = int(rng.integers(2, 5))
        n_filler = int(rng.integers(1, 4))
        content = np.stack([self._perturbed(c, spec.text_sigma, rng) @ self.text_map for _ in range(n_content)])
        filler = self.fillers[rng.integers(0, len(self.fillers), n_filler)]
        tokens = np.concatenate([content, filler])
        return tokens[rng.permutation(len(tokens))]

    def build(self, encoder: ToyEncoder | None = None, preprocess: PreprocessConfig = PreprocessConfig()) -> RetrievalData:
        encoder = encoder or ToyEncoder(seed=self.spec.seed, d_model=self.spec.d_model)
        audio, text, pairs = [], [], []
        for i in range(self.n_items):
            w = self.waveform(i)
            seq = encode_clip(w, encoder, preprocess)
            audio.append(AudioItem(i, int(self.labels[i]), self.splits[i], seq, source=_Resynth(self, i)))
            text.append(TextItem(i, int(self.labels[i]), self.splits[i], self.caption_tokens(i)))
            pairs.append((i, i))
        return RetrievalData(audio, text, pairs, preprocess, encoder)


@dataclass
class _Resynth:
    corpus: SyntheticCorpus
    index: int

    def __call__(self) -> Waveform:
        return self.corpus.waveform(self.index)


def synthetic_dataset(spec: SyntheticDatasetSpec, preprocess: PreprocessConfig = PreprocessConfig()) -> RetrievalData:
    return SyntheticCorpus(spec).build(preprocess=preprocess)


# -------------------------------------------------------------- manifests

def chunk_row_id(clip_key: int, chunk_index: int) -> int:
    """Row id of one chunk embedding inside an embedding container."""
    return (int(clip_key) << 16) | int(chunk_index)


def caption_id(audio_id: int, caption_index: int) -> int:
    return (int(audio_id) << 16) | int(caption_index)


def read_manifest(path: str | Path) -> list[dict]:
    """JSONL records ``{"id": int, "audio": ref, "captions": [str, ...], "split"?: str}``.

    ``audio`` is a WAV path (relative to the manifest) or ``aemb:<file>#<clip key>``.
    """
    path = Path(path)
    records = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not isinstance(rec, dict) or "id" not in rec or "audio" not in rec:
            raise DataError(f"{path}:{lineno}: record needs 'id' and 'audio'")
        rec.setdefault("captions", [])
        records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def load_manifest(path: str | Path, encoder=None, text_encoder: ToyTextEncoder | None = None,
                  preprocess: PreprocessConfig = PreprocessConfig(), sample_rate: int | None = None,
                  seed: int = 0) -> RetrievalData:
    """Resolve every audio reference up front; unresolvable entries raise before any training."""
    path = Path(path)
    records = read_manifest(path)
    encoder = encoder or ToyEncoder(seed=seed)
    text_encoder = text_encoder or ToyTextEncoder(seed=seed, d_model=encoder.d_model)
    containers: dict[Path, dict[int, list[tuple[int, np.ndarray]]]] = {}
    order = make_rng(seed, 0x5917).permutation(len(records))
    default_split = {}
    for rank, idx in enumerate(order):
        frac = rank / len(records)
        default_split[int(idx)] = "train" if frac < 0.8 else "val" if frac < 0.9 else "test"
    audio, text, pairs = [], [], []
    for idx, rec in enumerate(records):
        aid = int(rec["id"])
        split = rec.get("split", default_split[idx])
        ref = str(rec["audio"])
        if ref.startswith("aemb:"):
            file_part, _, key = ref[5:].partition("#")
            fpath = (path.parent / file_part).resolve()
            if fpath not in containers:
                ids, vecs = read_embeddings(fpath)
                grouped: dict[int, list[tuple[int, np.ndarray]]] = {}
                for rid, v in zip(ids, vecs):
                    grouped.setdefault(int(rid) >> 16, []).append((int(rid) & 0xFFFF, v.astype(np.float64)))
                containers[fpath] = grouped
            rows = containers[fpath].get(int(key or aid))
            if not rows:
                raise DataError(f"record {aid}: no chunks for key {key or aid} in {fpath}")
            seq = np.stack([v for _, v in sorted(rows, key=lambda r: r[0])])
            source = None
        else:
            wav_path = (path.parent / ref).resolve()
            if not wav_path.exists():
                raise DataError(f"record {aid}: audio file {wav_path} not found")
            w = read_wav(wav_path, sample_rate)
            seq = encode_clip(w, encoder, preprocess, source_id=aid)
            source = _WavSource(wav_path, sample_rate)
        audio.append(AudioItem(aid, aid, split, seq, source))
        for j, cap in enumerate(rec["captions"]):
            text.append(TextItem(caption_id(aid, j), aid, split, text_encoder.encode(cap), cap))
            pairs.append((len(audio) - 1, len(text) - 1))
    return RetrievalData(audio, text, pairs, preprocess, encoder)


@dataclass
class _WavSource:
    path: Path
    sample_rate: int | None

    def __call__(self) -> Waveform:
        return read_wav(self.path, self.sample_rate)


def load_data(ref: str, seed: int = 0, d_model: int = 64) -> RetrievalData:
    """``synthetic:...`` spec string or a manifest path."""
    if ref.startswith("synthetic"):
        spec = SyntheticDatasetSpec.parse(ref)
        if spec.d_model != d_model:
            spec = replace(spec, d_model=d_model)
        return synthetic_dataset(spec)
    return load_manifest(ref, encoder=ToyEncoder(seed=seed, d_model=d_model), seed=seed)


def noisy_sequences(data: RetrievalData, spec: SnrSpec) -> list[np.ndarray]:
    """Re-encode every audio item with noise mixed in after silence removal."""
    out = []
    for item in data.audio:
        if item.source is None:
            raise DataError(f"audio {item.id} has no waveform source; noise needs raw audio")
        clip_spec = replace(spec, seed=spec.seed * 1_000_003 + item.id)
        out.append(encode_clip(item.source(), data.encoder, data.preprocess, noise=clip_spec))
    return out
