#!/usr/bin/env python3
"""Benchmark the numba-jitted region pooling kernel against the pure-numpy
fallback. The production path is chosen by RGALIGN_NO_NUMBA; this script
times both implementations directly on a training-shaped workload."""

import time

import numpy as np

from rgalign import accel


def bench(fn, images, boxes, owners, out, repeats=5):
    fn(images, boxes, owners, out, out)  # warm (JIT compile / cache touch)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(images, boxes, owners, out, out)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    rng = np.random.default_rng(0)
    n_img, size, n_box, out = 16, 64, 512, 64
    images = rng.random((n_img, size, size, 3)).astype(np.float32)
    centers = rng.uniform(0.3, 0.7, size=(n_box, 2))
    wh = rng.uniform(0.1, 0.5, size=(n_box, 2))
    corners = np.concatenate([(centers - wh / 2) * size,
                              (centers + wh / 2) * size], axis=1).astype(np.float32)
    owners = rng.integers(0, n_img, size=n_box).astype(np.int64)

    t_numpy = bench(accel._pool_regions_numpy, images, corners, owners, out)
    print(f"numpy fallback : {t_numpy * 1e3:8.1f} ms  "
          f"({n_box} boxes -> {out}x{out})")
    if accel.HAS_NUMBA:
        t_numba = bench(accel._pool_regions_jit, images, corners, owners, out)
        print(f"numba @njit    : {t_numba * 1e3:8.1f} ms")
        print(f"speedup        : {t_numpy / t_numba:8.2f}x")
        a = accel._pool_regions_numpy(images, corners, owners, out, out)
        b = accel._pool_regions_jit(images, corners, owners, out, out)
        print(f"max |diff|     : {np.max(np.abs(a - b)):.2e}")
    else:
        print("numba unavailable (or RGALIGN_NO_NUMBA=1): fallback only")
    print(f"active backend : {accel.backend_name()}")


if __name__ == "__main__":
    main()
