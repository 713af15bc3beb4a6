"""Dense tensors and a tape for reverse-mode differentiation.

The graph is small and fixed (refiner + losses), so the tape is simply rebuilt
on every forward pass::

    with Tape() as tape:
        loss = ops...
    tape.backward(loss)

Ops record themselves only while a tape is active; outside a tape they are
plain numpy calls, which is how the inference path runs.

Tensors are float64 arrays. The basic unit is a 2-D matrix, but every op also
accepts leading batch axes so that a padded batch runs as one graph.

Randomness goes through :func:`make_rng`, a Philox-4x64-10 counter-based
generator (numpy's ``Philox``) keyed by an integer seed plus optional stream
ids, so dropout masks are reproducible bit-for-bit on any platform.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, UsageError


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``; ``stream`` selects an independent substream.

    The 128-bit Philox key is ``SeedSequence([seed, *stream]).generate_state(2)``.
    """
    key = np.random.SeedSequence([int(seed), *(int(s) for s in stream)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2] if self.data.ndim >= 2 else 1

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"


Tensor2D = Tensor


class Tape:
    """Ordered record of primitive ops with their vector-Jacobian products."""

    _active: list["Tape"] = []

    def __init__(self) -> None:
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable) -> None:
        self.records.append((op, inputs, out, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every ``requires_grad`` tensor used on the tape.

        Tensors used on the tape but unreachable from ``loss`` get zero grads.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(rec[2] is loss for rec in self.records):
            raise UsageError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for _, inputs, out, vjp in reversed(self.records):
            for t in inputs:
                if t.requires_grad:
                    leaves[id(t)] = t
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            t.grad = grads.get(key, np.zeros_like(t.data))


def active_tape() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(out: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out if out.dtype == np.float64 else out.astype(np.float64)
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp: Callable) -> Tensor:
    t = _wrap(np.asarray(out))  # op outputs are fresh arrays; no defensive copy needed
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, t, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------- ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def mask(a, keep: np.ndarray) -> Tensor:
    """Multiply by a constant (0/1 or scaled) mask; the mask gets no gradient."""
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=np.float64)
    return _emit("mask", (a,), a.data * keep, lambda g: (_unbroadcast(g * keep, a.shape),))


def softmax(x, valid: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    Entries where ``valid`` is False get probability exactly 0.
    """
    x = as_tensor(x)
    y = kernels.softmax(x.data, valid)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, vjp)


softmax_rows = softmax


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, vjp)


def gelu(x) -> Tensor:
    """x * Phi(x) with the exact erf form of the normal CDF."""
    x = as_tensor(x)
    return _emit("gelu", (x,), kernels.gelu(x.data), lambda g: (g * kernels.gelu_grad(x.data),))


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in inference mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mask(x, keep)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("reduce", (x,), np.asarray(out), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis, keepdims), 1.0 / float(n))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.maximum(np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True)), eps)
    y = x.data / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _emit("normalize", (x,), y, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", (x, gain, bias), out, vjp)


# ------------------------------------------------------------ grad checking

def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-8
) -> dict[str, float]:
    """Compare tape gradients with central differences; returns max relative error per tensor.

    ``loss_fn`` must rebuild the graph from the current parameter values and be
    deterministic (reseed any rng inside it).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def f() -> float:
        return loss_fn().item()

    report = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        gn = numerical_grad(f, p, h)
        report[p.name or f"param{i}"] = relative_error(ga, gn, floor)
    return report


def is_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)

