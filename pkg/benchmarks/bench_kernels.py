"""Time the compiled kernels against their pure-numpy twins.

Usage: python benchmarks/bench_kernels.py [--paths N] [--repeat R]

Covers the three hot loops: stopped forward simulation, the coupled
fine/coarse pairing, and quadrature-based backward induction.  The two
backends are exercised through the same public entry points and must
return bit-identical arrays; the script checks that along the way.
"""

import argparse
import time

import numpy as np

from exitbsde import (
    GridSpec,
    backward_induction,
    catalog_benchmark,
    coupled_fine_reference,
    simulate_paths,
)
from exitbsde._accel import HAS_NUMBA


def time_best(fn, repeat):
    best = float("inf")
    value = None
    for _ in range(repeat):
        start = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - start)
    return best, value


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--paths", type=int, default=50_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    if not HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    b1 = catalog_benchmark("B1")
    b3 = catalog_benchmark("B3")

    cases = {
        "forward (stopped)": lambda backend: simulate_paths(
            b3.spec, GridSpec(0.01, 8.0), args.paths, seed=7,
            backend=backend).exit_times,
        "forward (coupled, refine 8)": lambda backend: coupled_fine_reference(
            b3.spec, GridSpec(0.04, 8.0), 8, args.paths, seed=7,
            backend=backend).fine.exit_times,
        "backward induction (mesh 401)": lambda backend: backward_induction(
            b1.spec, GridSpec(0.01, 20.0), mesh=401,
            backend=backend).slice_at(0.0),
    }

    # first numba call per kernel pays the compile cost; warm up outside
    # the timed region
    for fn in cases.values():
        fn("numba")

    print(f"{'case':<32}{'numba':>10}{'numpy':>10}{'speedup':>9}")
    for name, fn in cases.items():
        t_nb, v_nb = time_best(lambda: fn("numba"), args.repeat)
        t_np, v_np = time_best(lambda: fn("numpy"), args.repeat)
        if not np.array_equal(v_nb, v_np):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<32}{t_nb:>9.3f}s{t_np:>9.3f}s{t_np / t_nb:>8.1f}x")
    print("outputs bit-identical across backends")


if __name__ == "__main__":
    main()
