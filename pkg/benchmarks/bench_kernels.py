"""Time the Python and Cython kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend, the
speedup, and whether both backends returned identical results.
"""

import argparse
import timeit
from fractions import Fraction

import numpy as np

from codescheme import available_backends
from codescheme.maps import gather_table


def cases(rng):
    points = rng.normal(size=(5000, 3))
    codebook = rng.normal(size=(400, 3))
    xi = rng.normal(size=(64 * 64, 3))
    filters = rng.normal(size=(8, 9, 3))
    table = gather_table((64, 64), (3, 3), (Fraction(1), Fraction(1)), (64, 64))
    upstream = rng.normal(size=(64 * 64, 8))
    atoms = rng.normal(size=(9, 2))
    weights = rng.dirichlet(np.ones(9))
    return {
        "nearest 5000x400 (d=3)": lambda k: k.nearest(points, codebook),
        "conv_gather 64x64, 3x3, 3->8": lambda k: k.conv_gather(xi, filters, table),
        "conv_gather_adjoint": lambda k: k.conv_gather_adjoint(upstream, filters, table, xi.shape[0]),
        "conv_gather_filter_grad": lambda k: k.conv_gather_filter_grad(upstream, xi, table),
        "pollard n=9 k=3": lambda k: k.pollard(atoms, weights, 3),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == np.shape(b) and np.allclose(a, b, rtol=1e-12, atol=1e-12)
    return abs(a - b) <= 1e-12 * max(1.0, abs(a))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} " + " ".join(f"{name:>10s}" for name in backends) + "    speedup  match")
    for label, fn in cases(rng).items():
        times, results = [], []
        for mod in backends.values():
            results.append(fn(mod))
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) > 1 else "       -"
        match = "yes" if all(same(results[0], r) for r in results[1:]) else "NO"
        print(f"{label:32s} " + " ".join(f"{t * 1e3:8.2f}ms" for t in times) + f"  {speed}  {match}")


if __name__ == "__main__":
    main()
