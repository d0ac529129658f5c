"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are called in-process through the ``backend=`` argument, which
is what ``SCOREALIGN_DISABLE_NUMBA=1`` selects globally. The first numba call
(compilation, or loading the on-disk cache) is excluded.
"""

import argparse
import time

import numpy as np

from scorealign import kernels


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    k, d = 3, 2
    w = np.ones(k) / k
    means = rng.normal(size=(k, d)) * 2
    covs = np.array([np.eye(d) * 0.25] * k)
    x = rng.normal(size=(4096, d)) * 2
    a, b = np.ones(4096), rng.uniform(0.05, 3.0, 4096)
    s1, s2 = rng.normal(size=(4000, 2)), rng.normal(size=(4000, 2))
    return {
        "gmm_eval n=4096 K=3 d=2": lambda be: kernels.gmm_eval(x, a, b, w, means, covs, False, backend=be),
        "gmm_eval +hessian": lambda be: kernels.gmm_eval(x, a, b, w, means, covs, True, backend=be),
        "energy_distance 4000x4000": lambda be: kernels.energy_distance(s1, s2, backend=be),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':32s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speed-up':>9s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        fn("numba")
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        print(f"{name:32s} {t_np * 1e3:12.2f} {t_nb * 1e3:12.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
