"""Compiled vs pure-Python collision loops on small velocity grids.

Usage: python benchmarks/bench_kernels.py [--sizes 4 6] [--repeat 3]

For each grid size the script times operator assembly, one Gamma(f, g)
evaluation and the full Gamma tensor with both backends, checks that the
two backends agree and prints a table with the speed-up.
"""

import argparse
import time

import numpy as np

from spectral_boltzmann import kernels
from spectral_boltzmann.collision import GammaTensor, KernelSpec, assemble_all, gamma_eval
from spectral_boltzmann.velocity import VelocityGrid


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(spec, grid, rng):
    f = rng.standard_normal(grid.size)
    g = rng.standard_normal(grid.size)
    return {
        "assemble": lambda b: assemble_all(spec, grid, use_cache=False, backend=b)["L"].matrix,
        "gamma_pair": lambda b: gamma_eval(spec, f, g, grid, backend=b),
        "gamma_tensor": lambda b: GammaTensor(spec, grid, backend=b).data,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[4, 6])
    ap.add_argument("--V", type=float, default=4.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        kernels.get("compiled")
    except ImportError:
        raise SystemExit("compiled backend not built; run `pip install -e . --no-build-isolation`")

    spec = KernelSpec(gamma=1.0, s=0.5, theta_min=0.2)
    print(f"{'N':>3} {'kernel':<13} {'compiled s':>11} {'python s':>10} {'speed-up':>9} {'max rel diff':>13}")
    for n in args.sizes:
        grid = VelocityGrid(args.V, n)
        for name, fn in cases(spec, grid, np.random.default_rng(n)).items():
            tc, a = best_of(lambda: fn("compiled"), args.repeat)
            # the Python loops are slow, one pass is enough
            tp, b = best_of(lambda: fn("python"), 1)
            diff = float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-300))
            print(f"{n:>3} {name:<13} {tc:>11.4f} {tp:>10.3f} {tp / tc:>8.1f}x {diff:>13.2e}")


if __name__ == "__main__":
    main()
