"""Benchmark the hot kernels on the numba and numpy backends.

Run as ``python -m tweezer_forge.benchmark``; sizes mirror the production
workload (512x512 SLM, ~100 traps).  The numpy timings are always measured;
numba timings appear when the backend is active (unset
``TWEEZER_FORGE_NO_NUMBA`` and install numba).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels


def _time(fn, repeats):
    fn()  # warm-up (and JIT compile on the numba path)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_workload(n_pixels=512, n_traps=100, n_voxels=41):
    rng = np.random.default_rng(0)
    field = rng.standard_normal((n_pixels, n_pixels)) + 1j * rng.standard_normal(
        (n_pixels, n_pixels)
    )
    xs = (np.arange(n_pixels) - (n_pixels - 1) / 2) * 20.0
    ys = xs.copy()
    traps = rng.uniform(-22, 22, (n_traps, 3))
    coeff = rng.standard_normal(n_traps) + 1j * rng.standard_normal(n_traps)
    vx = np.linspace(-3, 3, n_voxels)
    vy = np.linspace(-3, 3, n_voxels)
    vz = np.linspace(-5, 5, 5)
    points = rng.uniform(-25, 25, (120, 2))
    seg_a = rng.uniform(-25, 25, (40, 2))
    seg_b = rng.uniform(-25, 25, (40, 2))
    alpha, gamma = 7.392e-4, 3.696e-8
    image = np.zeros((120, 120))
    spots = (
        rng.uniform(10, 110, 60), rng.uniform(10, 110, 60),
        rng.uniform(50, 200, 60), rng.uniform(0.8, 3.0, 60),
    )
    return {
        "trap_fields": (
            lambda: kernels.trap_fields(field, xs, ys, traps, alpha, gamma),
            lambda: kernels.trap_fields_numpy(field, xs, ys, traps, alpha, gamma),
        ),
        "back_field": (
            lambda: kernels.back_field(coeff, xs, ys, traps, alpha, gamma),
            lambda: kernels.back_field_numpy(coeff, xs, ys, traps, alpha, gamma),
        ),
        "intensity_slices": (
            lambda: kernels.intensity_slices(field, xs, ys, vx, vy, vz, alpha, gamma),
            lambda: kernels.intensity_slices_numpy(field, xs, ys, vx, vy, vz, alpha, gamma),
        ),
        "segment_point_distances": (
            lambda: kernels.segment_point_distances(points, seg_a, seg_b),
            lambda: kernels.segment_point_distances_numpy(points, seg_a, seg_b),
        ),
        "render_spots": (
            lambda: kernels.render_spots(image.copy(), *spots),
            lambda: kernels.render_spots_numpy(image.copy(), *spots),
        ),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pixels", type=int, default=512)
    parser.add_argument("--traps", type=int, default=100)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    workload = build_workload(args.pixels, args.traps)
    print(f"active backend: {kernels.backend_name()}  "
          f"({args.pixels}x{args.pixels} pixels, {args.traps} traps)")
    print(f"{'kernel':<28}{'dispatched':>12}{'numpy':>12}{'speedup':>10}")
    for name, (dispatched, reference) in workload.items():
        t_disp = _time(dispatched, args.repeats)
        t_ref = _time(reference, args.repeats)
        print(f"{name:<28}{t_disp * 1e3:>10.2f} ms{t_ref * 1e3:>10.2f} ms"
              f"{t_ref / t_disp:>9.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
