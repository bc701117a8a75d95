"""Compare the compiled and numpy REML kernels on one likelihood+gradient pass and on a full FA fit.

Usage: python3 benchmarks/bench_reml.py [--n-g 500] [--n-e 30] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from gxe import _kernel
from gxe.mixed_model import Cells, fit_fa, reml_terms
from gxe.simgen import SimConfig, simulate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-g", type=int, default=500)
    ap.add_argument("--n-e", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    d, truth = simulate(SimConfig(seed=0, n_g=args.n_g, n_e=args.n_e, n_years=max(5, args.n_e // 3)))
    cells = Cells.from_dataset(d)
    gi = [truth.environment_ids.index(e) for e in cells.environment_ids]
    U = np.hstack([truth.Lambda[gi], np.ones((len(gi), 1))])
    psi, rvar = truth.Psi[gi], truth.resid_vars[gi]
    print(f"{args.n_g} genotypes x {args.n_e} environments, {d.n_s} plots")

    backends = ["python"]
    try:
        _kernel.get("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy fallback only")

    results = {}
    for name in backends:
        k = _kernel.get(name)
        one = min(timeit.repeat(lambda: reml_terms(cells, U, psi, rvar, grad=True, kernel=k), number=1, repeat=args.repeat))
        saved = _kernel.kernel
        _kernel.kernel = k
        try:
            fit = min(timeit.repeat(lambda: fit_fa(d, seed=0), number=1, repeat=max(1, args.repeat // 2)))
        finally:
            _kernel.kernel = saved
        results[name] = (one, fit)
        print(f"{name:>7}: loglik+gradient {one * 1e3:8.2f} ms   full FA fit {fit:7.2f} s")
    if len(results) == 2:
        c, p = results["cython"], results["python"]
        print(f"speedup: {p[0] / c[0]:.1f}x per pass, {p[1] / c[1]:.1f}x per fit")


if __name__ == "__main__":
    main()
