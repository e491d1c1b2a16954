"""Time the compiled kernels against the pure-numpy fallback.

Run as `python benchmarks/bench_kernels.py`. The first numba call pays
JIT compilation; a warmup round keeps that out of the timings.
"""

import time

import numpy as np

from handnet import kernels


def bench(fn, args, repeats=5):
    fn(*args)                                   # warmup / JIT
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    cases = []

    # shapes cut from the real stage dims: early (large HW, thin C) and
    # late (small HW, wide C)
    for tag, (n, h, w, ci, co, k) in [
        ("conv3x3 56x56x40->10", (1, 56, 56, 40, 10, 3)),
        ("conv1x1 28x28x144->64", (1, 28, 28, 144, 64, 1)),
        ("conv3x3 14x14x128->40", (1, 14, 14, 128, 40, 3)),
    ]:
        x = rng.standard_normal((n, h + k - 1, w + k - 1, ci)).astype(np.float32)
        wgt = rng.standard_normal((k, k, ci, co)).astype(np.float32)
        cases.append((tag, "conv2d", (x, wgt, 1)))

    for tag, (n, h, w, c, k) in [
        ("dwise3x3 56x56x40", (1, 56, 56, 40, 3)),
        ("dwise2x2 28x28x64 s2", (1, 28, 28, 64, 2)),
    ]:
        s = 2 if "s2" in tag else 1
        x = rng.standard_normal((n, h + k - 1, w + k - 1, c)).astype(np.float32)
        wgt = rng.standard_normal((k, k, c)).astype(np.float32)
        cases.append((tag, "depthwise", (x, wgt, s)))

    names = [n for n in ("numpy", "numba") if n in kernels.available_backends()]
    print(f"backends: {', '.join(names)}")
    header = f"{'case':28s}" + "".join(f"{n:>12s}" for n in names)
    if len(names) > 1:
        header += f"{'numba wins':>12s}"
    print(header)
    for tag, fn_name, args in cases:
        times = [bench(getattr(kernels._BACKENDS[name], fn_name), args)
                 for name in names]
        row = f"{tag:28s}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
