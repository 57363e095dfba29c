"""Compiled versus numpy kernels on the lattice hot paths.

Usage: python3 benchmarks/bench_kernels.py [--N 512] [--repeat 5]
Prints the best wall time per kernel and backend, plus the speedup.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fbsde_smp import _pykernels
from fbsde_smp.adjoint import solve_first_order_adjoint
from fbsde_smp.fbsde import solve_coupled
from fbsde_smp.problem import preset
from fbsde_smp.variation import solve_delta, solve_first_variation

try:
    from fbsde_smp import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def poly_args(N: int):
    pr = preset("nonlinear", N=N)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    first = solve_first_order_adjoint(pr.coeffs, opt, pr.beta0)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, pr.spike.u, None, pr.beta0)
    sys_ = solve_first_variation(pr.coeffs, opt, first, delta, pr.spike, check_route=None).system
    sp_, wp, sm, wm = sys_.stencils()
    c = np.ascontiguousarray
    return (N, pr.grid.dt, c(sp_, dtype=np.int64), c(wp), c(sm, dtype=np.int64), c(wm), c(sys_.coef),
            c(sys_.forcing), c(sys_.lam_p), c(sys_.lam_m), c(sys_.mu_p), c(sys_.mu_m), c(sys_.terminal))


def best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run pip install -e . --no-build-isolation")
    args = poly_args(a.N)
    xq = np.random.default_rng(0).uniform(-3, 3, 200_000)
    vals = np.ascontiguousarray(np.random.default_rng(1).normal(size=(2, a.N + 1)))
    cases = {
        "poly_backward": lambda m: m.poly_backward(*args),
        "interp_many": lambda m: m.interp_many(vals, -3.0, 6.0 / a.N, xq),
        "cubic_stencil": lambda m: m.cubic_stencil(xq, -3.0, 6.0 / a.N, a.N + 1),
    }
    print(f"N={a.N} repeat={a.repeat}")
    print(f"{'kernel':<15}{'cython [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name, fn in cases.items():
        tc = best(lambda: fn(_ckernels), a.repeat)
        tp = best(lambda: fn(_pykernels), a.repeat)
        print(f"{name:<15}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}")


if __name__ == "__main__":
    main()
