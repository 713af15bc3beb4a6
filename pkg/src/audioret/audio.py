"""Audio preprocessing: silence removal, fixed-length chunking, SNR noise mixing,
and a deterministic toy chunk encoder.

Toy encoder constants (fixed, part of the encoding contract):

* frames: 32 ms Hann windows, 16 ms hop, FFT size = max(256, next pow2 >= frame)
* 64 triangular bands, centres evenly spaced on normalised frequency (0, Nyquist)
* feature_b = ln(max(mean over frames of band energy_b, 1e-10))
* embedding = ((features - ln 1e-3) / 4) @ P, P ~ N(0, 1/64) drawn from
  ``make_rng(seed, 0x70E)`` with shape 64 x d_model
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.io import wavfile
from scipy.signal import decimate as _decimate

from . import kernels
from .errors import ConfigError, DataError, DegenerateAudio, EmptyAudio
from .numerics import make_rng

N_BANDS = 64
LOG_FLOOR = 1e-10
LOG_REF = math.log(1e-3)
FEATURE_SCALE = 4.0
FRAME_S = 0.032
HOP_S = 0.016


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise EmptyAudio("waveform has no samples")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class ChunkSet:
    chunks: list[Waveform]
    source_id: str | int = ""

    @property
    def m(self) -> int:
        return len(self.chunks)

    def as_array(self) -> np.ndarray:
        return np.stack([c.samples for c in self.chunks])


@dataclass(frozen=True)
class PreprocessConfig:
    chunk_len_s: float = 10.0
    min_gap_s: float = 1.0
    frame_ms: float = 20.0
    hop_ms: float = 10.0
    threshold_db: float = -40.0


@dataclass
class SnrSpec:
    """Noise injection request. ``noise`` is a waveform or a callable (n_samples, rng) -> samples."""

    snr_db: float
    noise: Waveform | Callable[[int, np.random.Generator], np.ndarray] | None = None
    seed: int = 0

    def noise_for(self, n: int, sample_rate: int, rng: np.random.Generator) -> Waveform:
        if self.noise is None:
            return Waveform(rng.standard_normal(n), sample_rate)
        if isinstance(self.noise, Waveform):
            return self.noise
        return Waveform(self.noise(n, rng), sample_rate)


# -------------------------------------------------------- silence removal

def silent_frames(w: Waveform, frame_ms: float = 20.0, hop_ms: float = 10.0, threshold_db: float = -40.0):
    """Boolean per frame (frames start every hop) plus frame/hop lengths in samples."""
    frame = max(1, int(round(w.sample_rate * frame_ms / 1000.0)))
    hop = max(1, int(round(w.sample_rate * hop_ms / 1000.0)))
    rms = kernels.frame_rms(w.samples, frame, hop)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return db < threshold_db, frame, hop


def _excise_once(samples, sr, frame_ms, hop_ms, threshold_db, min_gap_s):
    w = Waveform(samples, sr)
    silent, frame, hop = silent_frames(w, frame_ms, hop_ms, threshold_db)
    n = samples.size
    keep = np.ones(n, dtype=bool)
    # run boundaries of consecutive silent frames
    edges = np.diff(np.concatenate(([0], silent.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    min_gap = min_gap_s * sr
    for a, b in zip(starts, stops):
        lo = a * hop
        hi = min((b - 1) * hop + frame, n)
        if hi - lo > min_gap:
            keep[lo:hi] = False
    return samples[keep]


def remove_silence(w: Waveform, frame_ms: float = 20.0, hop_ms: float = 10.0, threshold_db: float = -40.0,
                   min_gap_s: float = 1.0) -> Waveform:
    """Excise runs of silent frames strictly longer than ``min_gap_s``.

    A frame is silent when its RMS is below ``threshold_db`` dBFS. The run spans
    from the first silent frame's start to the last one's end. Excision repeats
    until nothing changes, which makes the operation idempotent.
    """
    silent, _, _ = silent_frames(w, frame_ms, hop_ms, threshold_db)
    if silent.all():
        raise EmptyAudio("input is entirely silent")
    samples = w.samples
    while True:
        out = _excise_once(samples, w.sample_rate, frame_ms, hop_ms, threshold_db, min_gap_s)
        if out.size == samples.size:
            break
        if out.size == 0:
            raise EmptyAudio("nothing left after silence removal")
        samples = out
    return Waveform(samples, w.sample_rate)


# ---------------------------------------------------------------- chunking

def chunk(w: Waveform, chunk_len_s: float = 10.0, source_id: str | int = "") -> ChunkSet:
    """Non-overlapping fixed windows; a tail of >= 1 s is zero-padded, shorter tails dropped.

    A clip shorter than one chunk always yields one padded chunk.
    """
    if chunk_len_s <= 0:
        raise ConfigError("chunk_len_s must be positive")
    size = int(round(chunk_len_s * w.sample_rate))
    n = w.samples.size
    full, tail = divmod(n, size)
    pieces = [w.samples[i * size:(i + 1) * size] for i in range(full)]
    if full == 0 or tail >= w.sample_rate:
        last = np.zeros(size)
        last[:tail] = w.samples[full * size:]
        pieces.append(last)
    return ChunkSet([Waveform(p, w.sample_rate) for p in pieces], source_id)


def expected_chunk_count(n_samples: int, sample_rate: int, chunk_len_s: float = 10.0) -> int:
    size = int(round(chunk_len_s * sample_rate))
    full, tail = divmod(n_samples, size)
    return full + (1 if full == 0 or tail >= sample_rate else 0)


# ------------------------------------------------------------ noise mixing

def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_noise(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Crop (random window) or tile (random circular offset) noise to length n."""
    if noise.size >= n:
        start = int(rng.integers(0, noise.size - n + 1))
        return noise[start:start + n]
    offset = int(rng.integers(0, noise.size))
    reps = -(-(n + offset) // noise.size)
    return np.tile(noise, reps)[offset:offset + n]


def scale_noise(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Rescale ``noise`` so that 10 log10(P_signal / P_noise) = snr_db."""
    ps, pn = power(signal), power(noise)
    if ps == 0.0 or pn == 0.0:
        raise DegenerateAudio("signal and noise must both have nonzero power")
    return noise * math.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def mix_noise(signal: Waveform, noise: Waveform, spec: SnrSpec, clamp: bool = True) -> Waveform:
    rng = make_rng(spec.seed, 0x5A1)
    fitted = fit_noise(noise.samples, signal.samples.size, rng)
    mixed = signal.samples + scale_noise(signal.samples, fitted, spec.snr_db)
    if clamp:
        mixed = np.clip(mixed, -1.0, 1.0)
    return Waveform(mixed, signal.sample_rate)


def apply_snr(signal: Waveform, spec: SnrSpec) -> Waveform:
    rng = make_rng(spec.seed, 0x5A2)
    noise = spec.noise_for(signal.samples.size, signal.sample_rate, rng)
    return mix_noise(signal, noise, spec)


# ------------------------------------------------------------- toy encoder

def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def triangular_filterbank(n_fft: int, n_bands: int = N_BANDS) -> np.ndarray:
    """(n_bands x n_fft//2+1) weights, triangles on normalised frequency."""
    freqs = np.linspace(0.0, 1.0, n_fft // 2 + 1)
    edges = np.linspace(0.0, 1.0, n_bands + 2)
    fb = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def band_log_energies(chunk_samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """The 64 pre-projection features of one chunk."""
    frame = max(8, int(round(FRAME_S * sample_rate)))
    hop = max(1, int(round(HOP_S * sample_rate)))
    n_fft = max(256, _next_pow2(frame))
    x = np.asarray(chunk_samples, dtype=np.float64)
    if x.size < frame:
        x = np.concatenate([x, np.zeros(frame - x.size)])
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    spec = np.fft.rfft(frames * np.hanning(frame), n=n_fft, axis=1)
    pw = (spec.real ** 2 + spec.imag ** 2) / n_fft
    energies = pw.mean(axis=0) @ triangular_filterbank(n_fft).T
    return np.log(np.maximum(energies, LOG_FLOOR))


class EncoderPlugin(Protocol):
    name: str
    d_model: int
    deterministic: bool

    def encode(self, chunk: Waveform) -> np.ndarray: ...


@dataclass
class ToyEncoder:
    """Band log-energies followed by a fixed seed-determined random projection."""

    seed: int = 0
    d_model: int = 64
    name: str = "toy"
    deterministic: bool = True
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = make_rng(self.seed, 0x70E)
        self.projection = rng.standard_normal((N_BANDS, self.d_model)) / math.sqrt(N_BANDS)
        self.projection.setflags(write=False)

    def project(self, features: np.ndarray) -> np.ndarray:
        return ((features - LOG_REF) / FEATURE_SCALE) @ self.projection

    def encode(self, chunk: Waveform) -> np.ndarray:
        return self.project(band_log_energies(chunk.samples, chunk.sample_rate))

    def encode_many(self, chunks: ChunkSet) -> np.ndarray:
        feats = np.stack([band_log_energies(c.samples, c.sample_rate) for c in chunks.chunks])
        return self.project(feats)


def toy_encode(chunk_w: Waveform, seed: int = 0, d_model: int = 64) -> np.ndarray:
    return ToyEncoder(seed, d_model).encode(chunk_w)


def encode_clip(w: Waveform, plugin: EncoderPlugin, config: PreprocessConfig = PreprocessConfig(),
                noise: SnrSpec | None = None, source_id: str | int = "") -> np.ndarray:
    """remove_silence -> (optional noise) -> chunk -> per-chunk encode; m x d_model."""
    clean = remove_silence(w, config.frame_ms, config.hop_ms, config.threshold_db, config.min_gap_s)
    if noise is not None:
        clean = apply_snr(clean, noise)
    chunks = chunk(clean, config.chunk_len_s, source_id)
    if hasattr(plugin, "encode_many"):
        return plugin.encode_many(chunks)
    return np.stack([plugin.encode(c) for c in chunks.chunks])


# ------------------------------------------------------------------ WAV IO

def read_wav(path: str | Path, target_rate: int | None = None) -> Waveform:
    """Mono PCM16 or float32 WAV; optional integer-factor decimation to ``target_rate``."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: only single-channel audio is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    w = Waveform(samples, int(rate))
    if target_rate and target_rate != rate:
        w = decimate(w, target_rate)
    return w


def write_wav(path: str | Path, w: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(str(path), w.sample_rate, data)


def decimate(w: Waveform, target_rate: int) -> Waveform:
    if w.sample_rate % target_rate:
        raise ConfigError(f"only integer-factor decimation is supported ({w.sample_rate} -> {target_rate})")
    factor = w.sample_rate // target_rate
    return Waveform(_decimate(w.samples, factor, zero_phase=True), target_rate)
