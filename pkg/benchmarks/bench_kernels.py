"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from thbch import _kernels_py
from thbch.assembly import volume_data
from thbch.hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack
from thbch.splines import tensor_space, uniform_knots

try:
    from thbch import _kernels as _compiled
except ImportError:
    _compiled = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--nel", type=int, default=64, help="uniform cells per direction")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    kv = uniform_knots(2, args.nel)
    x = rng.random(200_000)
    spans = kv.find_span(x)
    space = HierarchicalSpace(HierarchicalMesh.uniform(LevelStack(tensor_space(2, (args.nel, args.nel)), 1), 0))
    vd = volume_data(space)
    uloc = vd.scatter.gather(rng.uniform(-1, 1, space.ndof))

    cases = {
        "basis_ders (200k pts, 2 ders)": lambda m: m.basis_ders(kv.knots, 2, spans, x, 2),
        f"nonlinear_local ({space.ncell} cells)": lambda m: m.nonlinear_local(vd.N, vd.G, vd.w, uloc, 1.0, 1.0),
    }
    print(f"{'kernel':40s} {'python [s]':>12s} {'compiled [s]':>13s} {'speedup':>8s}")
    for name, fn in cases.items():
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:40s} {tp:12.4f} {'n/a':>13s} {'n/a':>8s}")
            continue
        tc = best_of(lambda: fn(_compiled), args.repeat)
        print(f"{name:40s} {tp:12.4f} {tc:13.4f} {tp / tc:8.1f}")


if __name__ == "__main__":
    main()
