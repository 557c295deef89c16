"""Benchmark: JIT-compiled vs pure-numpy assignment kernel.

Both code paths run the identical shortest-augmenting-path algorithm; the
only difference is numba compilation. Run with WBCX_DISABLE_NUMBA unset so
both variants are importable in one process:

    python benchmarks/bench_assignment.py
"""

import time

import numpy as np

from wbcx.assignment import USE_NUMBA, _solve_kernel, _solve_rectangular


def _bench(solver, sizes, repeats, rng):
    out = {}
    for m, n in sizes:
        mats = [rng.uniform(-5.0, 5.0, size=(m, n)) for _ in range(repeats)]
        solver(mats[0])  # warm-up (triggers JIT compilation when applicable)
        t0 = time.perf_counter()
        for c in mats:
            solver(c)
        out[(m, n)] = (time.perf_counter() - t0) / repeats
    return out


def main():
    if not USE_NUMBA:
        print("WBCX_DISABLE_NUMBA is set; only the pure-numpy path is available.")
        return
    rng = np.random.default_rng(0)
    sizes = [(1, 10), (5, 10), (10, 10), (25, 50), (100, 100)]
    repeats = 200
    jit = _bench(_solve_kernel, sizes, repeats, rng)
    plain = _bench(_solve_rectangular, sizes, repeats, rng)

    print(f"{'size':>10} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for key in sizes:
        a, b = jit[key], plain[key]
        print(f"{key[0]:>4}x{key[1]:<5} {a * 1e6:>10.1f}us {b * 1e6:>10.1f}us "
              f"{b / a:>8.1f}x")

    # agreement spot check on random instances
    for _ in range(200):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(m, 9))
        c = rng.uniform(-5, 5, size=(m, n))
        assert np.array_equal(_solve_kernel(c), _solve_rectangular(c))
    print("agreement check passed (200 random instances)")


if __name__ == "__main__":
    main()
