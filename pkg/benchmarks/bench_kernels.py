#!/usr/bin/env python3
"""Time the numba kernel backend against the pure-numpy fallback.

Runs every hot kernel on training-shaped inputs and prints a table of
per-call times plus the speedup. The numba column includes a warmup call
so JIT compilation is not measured.

    python3 benchmarks/bench_kernels.py [--batch 64] [--size 48] [--repeat 5]
"""

import argparse
import time

import numpy as np

from ecgfusion import kernels


def timeit(fn, args, repeat):
    fn(*args)  # warmup (JIT compile + cache touch)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--channels", type=int, default=48)
    ap.add_argument("--out-channels", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if "numba" not in kernels.IMPLEMENTATIONS:
        raise SystemExit("numba backend unavailable; nothing to compare")

    rng = np.random.default_rng(0)
    b, c, s, co, k = args.batch, args.channels, args.size, args.out_channels, 3
    ho = s - k + 1
    x = rng.normal(size=(b, c, s, s))
    w4 = rng.normal(size=(co, c, k, k))
    w3 = rng.normal(size=(c, k, k))
    dy4 = rng.normal(size=(b, co, ho, ho))
    dy3 = rng.normal(size=(b, c, ho, ho))

    cases = [
        ("conv2d_fwd", (x, w4, 1)),
        ("conv2d_bwd_input", (dy4, w4, 1, s, s)),
        ("conv2d_bwd_kernel", (x, dy4, 1, k)),
        ("depthwise_fwd", (x, w3, 1)),
        ("depthwise_bwd_input", (dy3, w3, 1, s, s)),
        ("depthwise_bwd_kernel", (x, dy3, 1, k)),
    ]

    print(f"inputs: batch={b} channels={c} size={s}x{s} kernel={k}x{k}")
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, case_args in cases:
        t_np = timeit(kernels.IMPLEMENTATIONS["numpy"][name], case_args, args.repeat)
        t_nb = timeit(kernels.IMPLEMENTATIONS["numba"][name], case_args, args.repeat)
        ref = kernels.IMPLEMENTATIONS["numpy"][name](*case_args)
        alt = kernels.IMPLEMENTATIONS["numba"][name](*case_args)
        diff = float(np.max(np.abs(ref - alt)))
        print(f"{name:<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
