"""Compare the compiled kernels with the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
inputs of the size met in practice: the radial systems of one IMEX step
(``(L+1)**2`` systems of ``nr + 1`` unknowns) and the reaction on a
dealiasing grid.  Results of the two backends are compared as well.
"""

import argparse
import timeit

import numpy as np

from cellpol import _pykernels

try:
    from cellpol import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def make_inputs(L, nr, seed=0):
    rng = np.random.default_rng(seed)
    nsys, n = (L + 1) ** 2, nr + 1
    lower = rng.uniform(-1.0, -0.1, (nsys, n))
    upper = rng.uniform(-1.0, -0.1, (nsys, n))
    diag = 2.5 + rng.uniform(0.0, 1.0, (nsys, n))
    rhs = rng.standard_normal((nsys, n))
    L_grid = (3 * L + 1) // 2
    npts = (L_grid + 1) * (2 * L_grid + 2)
    U = rng.uniform(-0.1, 2.0, npts)
    v = rng.uniform(-0.1, 2.0, npts)
    c = rng.uniform(0.5, 1.5, npts)
    return (lower, diag, upper, rhs), (U, v, c, 0.1, 1.0, 1.0, 1.0, 1.0)


def bench(mod, tri, rea, repeat):
    out = {}
    for name, fn, args in (
        ("tridiag_solve", mod.tridiag_solve, tri),
        ("mm_reaction", mod.mm_reaction, rea),
        ("mm_reaction_partials", mod.mm_reaction_partials, rea),
    ):
        timer = timeit.Timer(lambda: fn(*args))
        number, _ = timer.autorange()
        best = min(timer.repeat(repeat=repeat, number=number)) / number
        out[name] = best
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, nargs="+", default=[16, 32])
    ap.add_argument("--nr", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':<22}{'L':>4}{'numpy [us]':>14}{'cython [us]':>14}{'speedup':>10}{'max diff':>12}")
    for L in args.L:
        tri, rea = make_inputs(L, args.nr)
        py = bench(_pykernels, tri, rea, args.repeat)
        cy = bench(_ckernels, tri, rea, args.repeat) if _ckernels else {}
        for name in py:
            if _ckernels:
                a = getattr(_pykernels, name)(*(tri if name == "tridiag_solve" else rea))
                b = getattr(_ckernels, name)(*(tri if name == "tridiag_solve" else rea))
                a, b = np.atleast_2d(np.array(a)), np.atleast_2d(np.array(b))
                diff = float(np.max(np.abs(a - b)))
                print(f"{name:<22}{L:>4}{py[name] * 1e6:>14.1f}{cy[name] * 1e6:>14.1f}{py[name] / cy[name]:>10.2f}{diff:>12.1e}")
            else:
                print(f"{name:<22}{L:>4}{py[name] * 1e6:>14.1f}{'-':>14}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
