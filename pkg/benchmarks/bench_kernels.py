"""Compiled kernels versus the numpy fallback.

Run ``python benchmarks/bench_kernels.py``. Each kernel is timed on the
workload one detector training step generates (16 images, a 32x32 level,
one 8x8 ROI per cell) plus a batch of exact binomial tails. Both backends
must agree before anything is timed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from olnfa._backend import load


def workload(seed=0, batch=16, grid=32, R=8):
    rng = np.random.default_rng(seed)
    maps = rng.normal(size=(batch, grid, grid))
    n = batch * grid * grid
    cx = rng.uniform(0.5, grid - 0.5, n)
    cy = rng.uniform(0.5, grid - 0.5, n)
    w = rng.uniform(0.5, 3.0, n)
    h = rng.uniform(0.5, 3.0, n)
    corners = np.stack([np.clip(cx - w / 2, 0, grid), np.clip(cy - h / 2, 0, grid),
                        np.clip(cx + w / 2, 0, grid), np.clip(cy + h / 2, 0, grid)], axis=1)
    bidx = np.repeat(np.arange(batch), grid * grid).astype(np.intp)
    upstream = rng.normal(size=(n, R, R))
    return maps, np.ascontiguousarray(corners), bidx, R, upstream


def tails(k):
    return [k.log_binomial_tail(kappa, 64, p) for p in (0.05, 0.2, 0.5) for kappa in range(65)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast, slow = load(True), load(False)
    if fast is slow:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    maps, corners, bidx, R, up = workload()
    np.testing.assert_allclose(fast.roi_align_forward(maps, corners, bidx, R),
                               slow.roi_align_forward(maps, corners, bidx, R), rtol=1e-12, atol=1e-12)
    for a, b in zip(fast.roi_align_backward(maps, corners, bidx, R, up),
                    slow.roi_align_backward(maps, corners, bidx, R, up)):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(tails(fast), tails(slow), rtol=1e-12, atol=1e-12)

    cases = {
        "roi_align_forward": lambda k: k.roi_align_forward(maps, corners, bidx, R),
        "roi_align_backward": lambda k: k.roi_align_backward(maps, corners, bidx, R, up),
        "log_binomial_tail x195": tails,
    }
    print(f"{'kernel':<24} {'compiled ms':>12} {'numpy ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        tf = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat)) * 1e3
        ts = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24} {tf:>12.2f} {ts:>10.2f} {ts / tf:>7.1f}x")


if __name__ == "__main__":
    main()
