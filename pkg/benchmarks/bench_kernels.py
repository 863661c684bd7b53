"""Compare the compiled and pure-numpy kernels on forward + backward passes.

    python benchmarks/bench_kernels.py [--repeats 20] [--rows 256 2048 8192]
"""

import argparse
import sys
import timeit

import numpy as np

from laser import kernels
from laser.policy import Arch, init_params


def batch(arch: Arch, n_rows: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    ctx = rng.integers(-1, arch.vocab_size, size=(n_rows, arch.context_window))
    targets = rng.integers(0, arch.vocab_size, size=n_rows)
    coeffs = rng.normal(size=n_rows) / n_rows
    return ctx, targets, coeffs


def step(k, params, ctx, targets, coeffs):
    dims = params.arch.dims
    x, h, logp = k.forward(params.theta, *dims, ctx)
    return k.backward(params.theta, *dims, ctx, x, h, logp, targets, coeffs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--rows", type=int, nargs="+", default=[256, 2048, 8192])
    args = ap.parse_args(argv)

    py = kernels.get("python")
    try:
        cy = kernels.get("cython")
    except ImportError:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    params = init_params(Arch(), seed=0)
    print(f"{'rows':>6} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for n in args.rows:
        ctx, targets, coeffs = batch(params.arch, n)
        diff = np.max(np.abs(step(py, params, ctx, targets, coeffs) - step(cy, params, ctx, targets, coeffs)))
        t = {}
        for name, k in (("python", py), ("cython", cy)):
            t[name] = min(timeit.repeat(lambda: step(k, params, ctx, targets, coeffs), number=1, repeat=args.repeats)) * 1e3
        print(f"{n:>6} {t['python']:>10.3f} {t['cython']:>10.3f} {t['python'] / t['cython']:>7.2f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
