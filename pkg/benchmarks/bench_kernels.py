"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--n 4000] [--m 8] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from fedsurv.kernels import available_backends
from fedsurv.survival import SurvivalData, TimeGrid, _bins, build_partial_matrix


def make_inputs(n, m, seed=0):
    rng = np.random.default_rng(seed)
    data = SurvivalData(np.zeros((n, 1)), rng.exponential(3.0, n), rng.random(n) < 0.7)
    grid = TimeGrid(tuple(np.linspace(0.3, 6.0, m)))
    mat = build_partial_matrix(data, grid)
    counts = (mat.at_risk_initial, np.array(mat.events, dtype=np.int64),
              np.array(mat.censored, dtype=np.int64))
    surv = rng.random((n, m))
    col = np.searchsorted(grid.as_array(), data.time, side="right").astype(np.int64) - 1
    return {
        "pseudo_values": lambda k: k.pseudo_values(*counts, _bins(data.time, grid), data.event, n),
        "cindex_counts": lambda k: k.cindex_counts(surv, data.time, data.event, col),
        "scaled_km": lambda k: k.scaled_km(*counts, 1.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = available_backends()
    cases = make_inputs(args.n, args.m)
    print(f"n={args.n} m={args.m}, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        times = {}
        for backend, mod in backends.items():
            loops = 1 if name == "cindex_counts" and backend == "python" else 3
            t = min(timeit.repeat(lambda: fn(mod), number=loops, repeat=args.repeat)) / loops
            times[backend] = t
        speed = (f"{times['python'] / times['cython']:>9.1f}x" if "cython" in times else "")
        print(f"{name:<16}" + "".join(f"{times[b] * 1e3:>12.3f}ms" for b in backends) + speed)
    outs = {b: [np.asarray(fn(mod), dtype=float) for fn in cases.values()]
            for b, mod in backends.items()}
    if "cython" in outs:
        same = all(np.array_equal(a, b) for a, b in zip(outs["python"], outs["cython"]))
        print(f"outputs bitwise equal across backends: {same}")


if __name__ == "__main__":
    main()
