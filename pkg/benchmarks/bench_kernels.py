"""Time the numba and numpy paths of the distance kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--samples 2000]

Shapes default to a CUB-like patch: 150 classes, 512-dim features.
"""
import argparse
import timeit

import numpy as np

from mpgan import _kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--classes", type=int, default=150)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--patches", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    labels = np.concatenate([np.arange(args.classes),
                             rng.integers(0, args.classes, args.samples - args.classes)])
    feats = rng.random((args.samples, args.dim))
    cents = _kernels.sorted_class_mean(feats, labels, args.classes)
    samples = rng.random((args.samples // 4, args.patches, args.dim))
    pcents = rng.random((args.classes // 3, args.patches, args.dim))
    w = rng.random(args.patches)

    cases = {
        "class_distance_tables": lambda jit: _kernels.class_distance_tables(feats, labels, cents, use_jit=jit),
        "weighted_centroid_scores": lambda jit: _kernels.weighted_centroid_scores(samples, pcents, w, use_jit=jit),
    }
    paths = [False, True] if _kernels.HAVE_NUMBA else [False]
    if not _kernels.HAVE_NUMBA:
        print("numba not installed; timing the numpy path only")
    print(f"{'kernel':<26}{'path':<7}{'best (ms)':>11}")
    for name, fn in cases.items():
        for jit in paths:
            fn(jit)  # warm-up, includes compilation for the jit path
            best = min(timeit.repeat(lambda: fn(jit), number=1, repeat=args.repeat))
            print(f"{name:<26}{'numba' if jit else 'numpy':<7}{best * 1e3:>11.2f}")
        if len(paths) == 2:
            a, b = fn(False), fn(True)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
            print(f"{'':<26}max |numpy - numba| = {diff:.1e}")


if __name__ == "__main__":
    main()
