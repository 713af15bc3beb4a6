"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``<name>_numpy`` (vectorised numpy/scipy) and
``<name>_numba`` (an ``@njit`` loop). The module-level name ``<name>`` is bound
to one of them at import time:

* ``AUDIORET_NUMBA=0`` forces the numpy path;
* otherwise numba is used when it can be imported.

Both paths agree to within a few ulps; bit-level determinism is guaranteed only
within one backend (numba's ``exp``/``erf`` come from libm, numpy ships its own
SIMD implementations).
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:  # numba is an optional accelerator
    import numba as _numba
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("AUDIORET_NUMBA", "1") != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _njit(fn):
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------- GELU

def gelu_numpy(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + _erf(x * _SQRT1_2))


def gelu_grad_numpy(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@_njit
def _gelu_loop(flat):
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v * 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
    return out


@_njit
def _gelu_grad_loop(flat):
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * (1.0 + math.erf(v * 0.7071067811865476)) + v * 0.3989422804014327 * math.exp(-0.5 * v * v)
    return out


def gelu_numba(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _gelu_loop(x.ravel()).reshape(x.shape)


def gelu_grad_numba(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _gelu_grad_loop(x.ravel()).reshape(x.shape)


# ------------------------------------------------------------------ softmax

def softmax_numpy(x: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; ``valid`` (broadcastable bool) masks entries to 0."""
    if valid is not None:
        x = np.where(valid, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


@_njit
def _softmax_rows(x2, valid2):
    rows, cols = x2.shape
    out = np.zeros_like(x2)
    for r in range(rows):
        m = -np.inf
        for c in range(cols):
            if valid2[r, c] and x2[r, c] > m:
                m = x2[r, c]
        s = 0.0
        for c in range(cols):
            if valid2[r, c]:
                e = math.exp(x2[r, c] - m)
                out[r, c] = e
                s += e
        for c in range(cols):
            out[r, c] /= s
    return out


def softmax_numba(x: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if valid is None:
        v = np.ones(x.shape, dtype=np.bool_)
    else:
        v = np.ascontiguousarray(np.broadcast_to(valid, x.shape))
    cols = x.shape[-1]
    return _softmax_rows(x.reshape(-1, cols), v.reshape(-1, cols)).reshape(x.shape)


# ---------------------------------------------------------------- frame RMS

def frame_rms_numpy(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """RMS of frames starting at 0, hop, 2*hop, ... < len(samples).

    Frames that run past the end use only the samples available.
    """
    n = samples.size
    count = (n + hop - 1) // hop
    padded = np.zeros(max((count - 1) * hop + frame_len, n))
    padded[:n] = samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[::hop]
    widths = np.minimum(np.arange(count) * hop + frame_len, n) - np.arange(count) * hop
    return np.sqrt(np.sum(frames * frames, axis=1) / widths)


@_njit
def _frame_rms_loop(samples, frame_len, hop):
    n = samples.size
    count = (n + hop - 1) // hop
    out = np.empty(count)
    for f in range(count):
        s = f * hop
        e = min(s + frame_len, n)
        acc = 0.0
        for i in range(s, e):
            acc += samples[i] * samples[i]
        out[f] = math.sqrt(acc / (e - s))
    return out


def frame_rms_numba(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    return _frame_rms_loop(np.ascontiguousarray(samples, dtype=np.float64), int(frame_len), int(hop))


# ------------------------------------------------- Wilcoxon null distribution

def signed_rank_null_numpy(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of the 2**n sign patterns per value of the positive rank sum.

    Ranks are passed doubled so mid-ranks of ties stay integral; index ``s`` of
    the result counts patterns whose doubled positive-rank sum equals ``s``.
    """
    r = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(r.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for v in r:
        shifted = np.zeros_like(counts)
        shifted[v:] = counts[: counts.size - v]
        counts = counts + shifted
    return counts


@_njit
def _signed_rank_null_loop(r):
    total = 0
    for v in r:
        total += v
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    top = 0
    for v in r:
        top += v
        for s in range(top, v - 1, -1):
            counts[s] += counts[s - v]
    return counts


def signed_rank_null_numba(doubled_ranks: np.ndarray) -> np.ndarray:
    return _signed_rank_null_loop(np.ascontiguousarray(doubled_ranks, dtype=np.int64))


# --------------------------------------------------------- AP@k over a batch

def average_precision_numpy(hits: np.ndarray, normalizer: np.ndarray) -> np.ndarray:
    """AP per row of a (queries x k) 0/1 hit matrix.

    ``normalizer`` is the per-query denominator (min(R, k) or R).
    """
    hits = hits.astype(np.float64)
    ranks = np.arange(1, hits.shape[1] + 1, dtype=np.float64)
    prec = np.cumsum(hits, axis=1) / ranks
    return np.sum(prec * hits, axis=1) / normalizer


@_njit
def _average_precision_loop(hits, normalizer):
    q, k = hits.shape
    out = np.zeros(q)
    for i in range(q):
        found = 0.0
        acc = 0.0
        for r in range(k):
            if hits[i, r]:
                found += 1.0
                acc += found / (r + 1.0)
        out[i] = acc / normalizer[i]
    return out


def average_precision_numba(hits: np.ndarray, normalizer: np.ndarray) -> np.ndarray:
    return _average_precision_loop(
        np.ascontiguousarray(hits, dtype=np.bool_), np.ascontiguousarray(normalizer, dtype=np.float64)
    )


KERNELS = ("gelu", "gelu_grad", "softmax", "frame_rms", "signed_rank_null", "average_precision")

_suffix = "_numba" if USE_NUMBA else "_numpy"
gelu = globals()["gelu" + _suffix]
gelu_grad = globals()["gelu_grad" + _suffix]
softmax = globals()["softmax" + _suffix]
frame_rms = globals()["frame_rms" + _suffix]
signed_rank_null = globals()["signed_rank_null" + _suffix]
average_precision = globals()["average_precision" + _suffix]
