"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--sizes 64,128,256] [--M 64] [--trials 5]

Times the per-datapoint weight-sampling forward and backward kernels and
raw normal generation, and checks that both backends produce the same
numbers.
"""

import argparse
import statistics
import time

import numpy as np

from varigrad.kernels import get_backend


def median_time(fn, trials):
    fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,128,256")
    ap.add_argument("--M", type=int, default=64)
    ap.add_argument("--trials", type=int, default=5)
    args = ap.parse_args()

    py = get_backend("python")
    try:
        cc = get_backend("compiled")
    except ImportError:
        raise SystemExit("compiled extension not built; run pip install -e . first")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'K=L':>6}{'python s':>12}{'compiled s':>12}{'speedup':>9}{'max |diff|':>12}")
    for K in (int(s) for s in args.sizes.split(",")):
        A = rng.standard_normal((args.M, K))
        theta = rng.standard_normal((K, K)) / np.sqrt(K)
        sa = np.full((K, K), 0.7)
        dB = rng.standard_normal((args.M, K))
        bpr = (K * K + 1) // 2
        stream = (5, 1, 0, bpr)
        cases = {
            "normals": lambda k: k.normals(5, 1, 0, args.M * K * K),
            "datapoint_forward": lambda k: k.datapoint_forward(A, theta, sa, *stream),
            "datapoint_backward": lambda k: k.datapoint_backward(A, theta, sa, dB, *stream),
        }
        for name, call in cases.items():
            t_py = median_time(lambda: call(py), args.trials)
            t_cc = median_time(lambda: call(cc), args.trials)
            a, b = call(py), call(cc)
            if isinstance(a, tuple):
                diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
            else:
                diff = float(np.max(np.abs(a - b)))
            print(f"{name:<20}{K:>6}{t_py:>12.4g}{t_cc:>12.4g}{t_py / t_cc:>9.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
