"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported in one process (``kernels.BACKENDS``) regardless of
``MANUALPA_NUMBA``; each kernel is called once for warm-up (JIT compile) first.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from manualpa import kernels


def cases(rng):
    a = rng.normal(size=(512, 3))
    b = rng.normal(size=(512, 3))
    ga = rng.normal(size=(16, 64, 3))
    gb = rng.normal(size=(16, 640, 3))
    cloud = rng.normal(size=(2048, 3))
    polys = np.zeros((10, 8, 2))
    counts = np.full(10, 4, dtype=np.int64)
    for k in range(10):
        c = rng.uniform(8, 56, size=2)
        polys[k, :4] = c + np.array([[-6, -6], [6, -6], [6, 6], [-6, 6]])
    cost = rng.integers(0, 5, size=(20, 20)).astype(float)
    return {
        "chamfer 512x512": ("chamfer", (a, b)),
        "nn_index_batched 16x64x640": ("nn_index_batched", (ga, gb)),
        "chamfer_cross 16x16 (64 pts)": ("chamfer_cross", (ga, ga.copy())),
        "fps 2048 -> 64": ("fps", (cloud, 64)),
        "fill_convex 10 quads 64x64": ("fill_convex", (polys, counts, 64, 64, 2)),
        "lsa 20x20 (ties)": ("lsa", (cost,)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, (name, call_args) in cases(rng).items():
        times = {}
        for backend in ("numba", "numpy"):
            fn = kernels.BACKENDS[backend][name]
            fn(*call_args)
            times[backend] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:32s} {times['numba']:10.3f} {times['numpy']:10.3f} {times['numpy'] / times['numba']:8.1f}x")


if __name__ == "__main__":
    main()
