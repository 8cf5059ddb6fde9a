"""Compare the compiled kernels with the numpy fallback on sphere frames.

Run ``python3 benchmarks/bench_kernels.py [--repeat R] [--levels 4,8,16]``. Prints one row per
(kernel, level) with the best-of-R wall time of each backend, the speedup and the largest
difference between their outputs, relative to the largest entry.
"""
import argparse
import timeit

import numpy as np

from rbal import _fallback
from rbal.bergman import orthonormal_frame, round_inner_product
from rbal.geometry import build_p1_backend, transform_sections

try:
    from rbal import _kernels
except ImportError:  # extension not built
    _kernels = None


def _inputs(k):
    # sections in the round orthonormal frame, as the solvers see them
    fr = build_p1_backend(k)
    B = orthonormal_frame(round_inner_product(k).H)
    Zh, dZh = transform_sections(fr, B)
    c = fr.reference_kd.unit_measure
    return (fr.n_points, np.ascontiguousarray(Zh), np.ascontiguousarray(dZh),
            np.ascontiguousarray(c, dtype=np.float64))


def _diff(a, b):
    """Largest entrywise difference relative to the largest entry."""
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--levels", default="4,8,16")
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not importable; only the fallback is available")
        return
    print(f"{'kernel':<14}{'k':>4}{'points':>9}{'cython ms':>12}{'numpy ms':>11}{'speedup':>9}{'rel diff':>11}")
    for k in (int(v) for v in args.levels.split(",")):
        P, Zh, dZh, c = _inputs(k)
        cases = {"fs_pointwise": ((Zh, dZh), _kernels.fs_pointwise, _fallback.fs_pointwise),
                 "moment_sum": ((Zh, c), _kernels.moment_sum, _fallback.moment_sum)}
        for name, (inp, fast, slow) in cases.items():
            tc = min(timeit.repeat(lambda: fast(*inp), number=1, repeat=args.repeat))
            tn = min(timeit.repeat(lambda: slow(*inp), number=1, repeat=args.repeat))
            d = _diff(fast(*inp), slow(*inp))
            print(f"{name:<14}{k:>4}{P:>9}{1e3 * tc:>12.2f}{1e3 * tn:>11.2f}{tn / tc:>9.2f}{d:>11.1e}")


if __name__ == "__main__":
    main()
