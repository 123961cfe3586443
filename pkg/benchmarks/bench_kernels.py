"""Benchmark the 7-point stencil matvec: compiled kernel vs pure-numpy
fallback, plus the end-to-end effect on one implicit solve.

Run:  python3 benchmarks/bench_kernels.py [--nx 60 --ny 220 --nz 10 --reps 50]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

import resflow as rf
from resflow import kernels


def time_matvec(fn, diag, tx, ty, tz, x, reps: int) -> float:
    out = np.empty_like(x)
    fn(diag, tx, ty, tz, x, out)   # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(diag, tx, ty, tz, x, out)
    return (time.perf_counter() - t0) / reps


def time_solve(op, b, x0, preconditioner: str, matvec_fn) -> float:
    saved = kernels.stencil_matvec
    kernels.stencil_matvec = matvec_fn
    try:
        options = rf.SolverOptions(preconditioner=preconditioner)
        solver = rf.LinearSolver(op, options)
        t0 = time.perf_counter()
        solver.solve(b, x0)
        return time.perf_counter() - t0
    finally:
        kernels.stencil_matvec = saved


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--nx", type=int, default=60)
    parser.add_argument("--ny", type=int, default=220)
    parser.add_argument("--nz", type=int, default=10)
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args()

    grid = rf.Grid3D(args.nx, args.ny, args.nz,
                     6.096 * args.nx, 3.048 * args.ny, 5.182 * args.nz)
    props = rf.FormationProps(porosity=0.2, oil_density=849.0,
                              viscosity=3e-3, compressibility=1e-9,
                              formation_factor=1.02)
    rng = np.random.default_rng(0)
    perm = 9.869233e-16 * np.exp(rng.normal(4.0, 0.7, grid.shape))
    op = rf.build_operator(grid, props, perm, (), 86400.0)
    x = rng.normal(size=grid.shape)

    print(f"grid {grid.nx}x{grid.ny}x{grid.nz} = {grid.n_cells} cells, "
          f"{args.reps} repetitions")

    t_numpy = time_matvec(kernels.stencil_matvec_numpy, op.diag, op.tx,
                          op.ty, op.tz, x, args.reps)
    print(f"matvec numpy : {t_numpy * 1e3:9.3f} ms")
    if kernels.HAVE_NUMBA:
        t_numba = time_matvec(kernels.stencil_matvec_numba, op.diag, op.tx,
                              op.ty, op.tz, x, args.reps)
        print(f"matvec numba : {t_numba * 1e3:9.3f} ms   "
              f"(speedup x{t_numpy / t_numba:.1f})")
        a = kernels.stencil_matvec_numpy(op.diag, op.tx, op.ty, op.tz, x)
        b = kernels.stencil_matvec_numba(op.diag, op.tx, op.ty, op.tz, x)
        print(f"agreement    : max rel diff "
              f"{np.abs(a - b).max() / np.abs(a).max():.2e}")
    else:
        print("matvec numba : unavailable in this environment")

    phi0 = np.full(grid.shape, 413.69e5)
    b_rhs = op.rhs(phi0 * (1 + 0.001 * rng.random(grid.shape)))
    for precond in ("jacobi", "amg"):
        t_np = time_solve(op, b_rhs, phi0, precond, kernels.stencil_matvec_numpy)
        line = f"solve {precond:6s}: numpy {t_np * 1e3:9.1f} ms"
        if kernels.HAVE_NUMBA:
            t_nb = time_solve(op, b_rhs, phi0, precond,
                              kernels.stencil_matvec_numba)
            line += f" | numba {t_nb * 1e3:9.1f} ms (x{t_np / t_nb:.2f})"
        print(line)


if __name__ == "__main__":
    main()
