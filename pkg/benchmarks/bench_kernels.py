"""Time every hot kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call) and then timed
with ``timeit``; the best of ``--repeat`` runs is reported.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from audioret import kernels


def cases(rng: np.random.Generator) -> dict[str, tuple]:
    att = rng.normal(size=(8, 256, 256))
    valid = np.ones((1, 1, 256), dtype=bool)
    valid[..., 200:] = False
    hits = rng.random((2000, 10)) < 0.3
    return {
        "gelu": (rng.normal(size=(256, 256)),),
        "gelu_grad": (rng.normal(size=(256, 256)),),
        "softmax": (att, valid),
        "frame_rms": (rng.uniform(-1, 1, 16000 * 30), 320, 160),
        "signed_rank_null": (np.arange(2, 52, 2, dtype=np.int64),),
        "average_precision": (hits, np.maximum(hits.sum(axis=1), 1).astype(float)),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=10)
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  max |diff|")
    for name, inputs in cases(rng).items():
        fns = {"numpy": getattr(kernels, f"{name}_numpy")}
        if kernels.HAVE_NUMBA:
            fns["numba"] = getattr(kernels, f"{name}_numba")
        times, outs = {}, {}
        for backend, fn in fns.items():
            outs[backend] = fn(*inputs)
            best = min(timeit.repeat(lambda: fn(*inputs), number=args.number, repeat=args.repeat))
            times[backend] = 1e3 * best / args.number
        numba_ms = times.get("numba", float("nan"))
        diff = float(np.max(np.abs(outs["numpy"] - outs["numba"]))) if "numba" in outs else float("nan")
        print(f"{name:<20}{times['numpy']:>12.3f}{numba_ms:>12.3f}{times['numpy'] / numba_ms:>10.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()
