"""Compiled vs numpy kernels on synthetic-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--size 64]

Prints the best-of-N wall time per kernel and backend, the speed-up, and
whether both backends returned identical arrays.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from lesiontransfer import kernels
from lesiontransfer import synth_data as S
from lesiontransfer.superpixel import refine_weights, rgb2lab, slic


def best_of(fn, repeats: int) -> tuple[float, object]:
    best, out = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(size: int, seed: int = 0):
    cfg = S.with_counts(S.default_config(), n_target_train=1, size=size)
    img = S.generate_split(cfg, seed, "target", "train").images[0].astype(np.float64)
    rng = np.random.default_rng(seed)
    lab = np.ascontiguousarray(rgb2lab(img))
    sp = slic(img, 64)
    K = 3
    yhat = rng.integers(0, K, size=(size, size)).astype(np.int64)
    v = (rng.random((size, size)) < 0.5).astype(np.uint8)
    H = W = size
    k_sp = 64
    Sg = math.sqrt(H * W / k_sp)
    ys = (np.arange(8) + 0.5) * H / 8
    xs = (np.arange(8) + 0.5) * W / 8
    centers = np.array([[*lab[int(y), int(x)], y, x] for y in ys for x in xs])
    frag = np.ascontiguousarray(rng.integers(0, 6, size=(size, size)), dtype=np.int64)
    return {
        "slic_assign": lambda k: _assign(k, lab, centers, Sg),
        "connected_components": lambda k: k.connected_components(frag)[0],
        "refine_votes": lambda k: k.refine_votes(v, yhat, sp.labels, K, False),
        "refine_votes_inplace": lambda k: k.refine_votes(v, yhat, sp.labels, K, True),
        "slic_full": lambda k: slic(img, 64, backend=_name(k)).labels,
        "refine_weights": lambda k: refine_weights(v, yhat, sp, K, backend=_name(k)),
    }


def _name(k) -> str:
    return "python" if k is kernels.get_backend("python") else "cython"


def _assign(k, lab, centers, Sg):
    labels = np.zeros(lab.shape[:2], dtype=np.int64)
    dist = np.empty(lab.shape[:2], dtype=np.float64)
    k.slic_assign(lab, np.ascontiguousarray(centers), float(Sg), 10.0, labels, dist)
    return labels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)
    py = kernels.get_backend("python")
    cy = kernels.get_backend("cython") if kernels.compiled_available() else None
    if cy is None:
        print("compiled kernels unavailable; timing the numpy fallback only")
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speed-up':>9s}  same")
    for name, fn in cases(args.size).items():
        tp, outp = best_of(lambda: fn(py), args.repeats)
        if cy is None:
            print(f"{name:24s} {1e3 * tp:10.2f} {'-':>10s} {'-':>9s}  -")
            continue
        tc, outc = best_of(lambda: fn(cy), args.repeats)
        same = np.array_equal(np.asarray(outp), np.asarray(outc))
        print(f"{name:24s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:9.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
