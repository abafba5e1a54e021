"""Benchmark the Lorenz-96 kernels: jit-compiled vs pure-numpy paths.

Run as: python benchmarks/bench_lorenz96.py [n] [steps]
The jit path is selected by default; VARDA_DISABLE_NUMBA=1 switches the
package itself to the numpy path, but this script times both directly.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from varda._l96_kernels import BACKENDS


def time_backend(name: str, n: int, steps: int, repeats: int = 5) -> dict:
    step, tlm, adjoint = BACKENDS[name]
    rng = np.random.default_rng(0)
    x = 8.0 + rng.standard_normal(n)
    d = rng.standard_normal(n)
    # warm up (compilation for the jit path)
    step(x, 0.05, 8.0, 1)
    tlm(x, d, 0.05, 8.0, 1)
    adjoint(x, d, 0.05, 8.0, 1)

    out = {}
    for label, fn in (("step", lambda: step(x, 0.05, 8.0, 1)),
                      ("tlm", lambda: tlm(x, d, 0.05, 8.0, 1)),
                      ("adjoint", lambda: adjoint(x, d, 0.05, 8.0, 1))):
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(steps):
                fn()
            best = min(best, time.perf_counter() - t0)
        out[label] = best / steps
    return out


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 40
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    print(f"Lorenz-96 RK4 kernels, n={n}, {steps} calls per timing")
    results = {name: time_backend(name, n, steps) for name in BACKENDS}
    header = f"{'kernel':<10}" + "".join(f"{name:>14}" for name in results)
    print(header)
    for label in ("step", "tlm", "adjoint"):
        row = f"{label:<10}"
        for name in results:
            row += f"{results[name][label] * 1e6:>12.2f}us"
        print(row)
    if "numba" in results and "numpy" in results:
        for label in ("step", "tlm", "adjoint"):
            speedup = results["numpy"][label] / results["numba"][label]
            print(f"{label}: jit speedup {speedup:.1f}x")


if __name__ == "__main__":
    main()
