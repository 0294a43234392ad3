"""Time each hot kernel on its numba and pure-numpy paths.

    python3 benchmarks/bench_kernels.py [--events N] [--size S] [--repeat R]

Outputs of the two paths are compared before timing, so a speedup is never
reported for a kernel that disagrees with its twin.
"""
import argparse
import time

import numpy as np

from neurolidar import kernels
from neurolidar._accel import use_numba
from neurolidar.scene import SceneConfig, _prim_rows, random_scene


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile, caches)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n_events, size, rng):
    h = w = size
    t = np.sort(rng.integers(0, 1_000_000, n_events)).astype(np.int64)
    x = rng.integers(0, w, n_events).astype(np.int32)
    y = rng.integers(0, h, n_events).astype(np.int32)
    p = rng.choice(np.array([-1, 1], np.int8), n_events)
    log_i = np.cumsum(rng.normal(0, 0.08, (50, h, w)), axis=0)
    stamps = np.arange(50, dtype=np.int64) * 10_000
    cfg = SceneConfig(height=size, width=size, max_range=60.0)
    prims, ego = random_scene(cfg, rng)
    rows = _prim_rows(prims, ego.position(0), 0)
    du, dv = cfg.ray_directions()
    return {
        "event frame": lambda b: kernels.accumulate_frame(x, y, p, h, w, backend=b),
        "voxel grid": lambda b: kernels.accumulate_voxel(t, x, y, p, 0, 1_000_000, 5, h, w,
                                                         backend=b),
        "event synthesis": lambda b: kernels.synthesize(log_i, stamps, 0.2, backend=b),
        "raycast": lambda b: kernels.raycast(du, dv, rows, cfg.max_range, backend=b),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=1_000_000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not use_numba():
        raise SystemExit("numba is disabled (NEUROLIDAR_NO_NUMBA); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':18s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.events, args.size, rng).items():
        if not same(fn("numpy"), fn("numba")):
            raise SystemExit(f"{name}: backends disagree")
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        print(f"{name:18s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
