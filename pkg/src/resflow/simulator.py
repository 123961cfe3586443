"""Fully implicit single-phase flow simulator.

Each time step solves the symmetric positive-definite stencil system from
:mod:`resflow.discretize` with preconditioned conjugate gradients. The state
variable is the gravity-adjusted potential; hydrostatic initialization makes
the initial potential spatially uniform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import wells as wells_mod
from .core_model import (FormationProps, Grid3D, ScalarField3D, _depth_term,
                   init_hydrostatic, potential_from_pressure)
from .discretize import StencilOperator, build_operator, transmissibility
from .wells import ConstantBHP, ConstantRate, WellSolution, WellSpec

__all__ = [
    "Scenario", "SolverOptions", "StepDiagnostics", "Solution",
    "LinearSolver", "SolverError", "assemble_step", "solve_linear", "run",
    "transmissibility",
]


class SolverError(RuntimeError):
    """Raised when the linear solve fails to converge or produces non-finite
    values."""


@dataclass(frozen=True)
class Scenario:
    """Complete description of one forward run. Permeability is per-cell
    isotropic, in m^2; all other quantities are SI as well."""

    grid: Grid3D
    props: FormationProps
    perm: np.ndarray
    wells: tuple[WellSpec, ...]
    p_ref_top: float             # initial pressure at the formation top, Pa
    dt: float                    # step length, s
    n_steps: int

    def __post_init__(self):
        perm = np.ascontiguousarray(self.perm, dtype=float)
        if isinstance(self.perm, ScalarField3D):
            perm = np.ascontiguousarray(self.perm.values, dtype=float)
        object.__setattr__(self, "perm", perm.reshape(self.grid.shape))
        object.__setattr__(self, "wells", tuple(self.wells))
        if not self.p_ref_top > 0:
            raise ValueError("p_ref_top must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def times(self) -> np.ndarray:
        """(n_steps + 1,) report times in seconds, t_0 = 0."""
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class SolverOptions:
    """Linear-solver controls. ``tol`` is relative: the conjugate-gradient
    loop stops once ||b - A x||_2 <= tol * ||b||_2."""

    tol: float = 1.0e-10
    max_iter: int = 1000
    preconditioner: str = "amg"   # "amg" | "jacobi"

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.preconditioner not in ("amg", "jacobi"):
            raise ValueError("preconditioner must be 'amg' or 'jacobi'")


@dataclass(frozen=True)
class StepDiagnostics:
    iterations: np.ndarray       # (n_steps,) CG iterations per step
    rel_residuals: np.ndarray    # (n_steps,) final ||b - A x|| / ||b||
    rhs_norms: np.ndarray        # (n_steps,) ||b||_2 per step
    wall_time: float             # total solve wall time, s


class LinearSolver:
    """Preconditioned conjugate gradients bound to one stencil operator.

    The preconditioner is set up once and reused across time steps. The loop
    is written out explicitly (rather than delegated to a library routine) so
    iteration counts and convergence behaviour are identical on every platform
    and under both kernel paths.
    """

    def __init__(self, op: StencilOperator, options: SolverOptions):
        self.op = op
        self.options = options
        if options.preconditioner == "amg":
            import pyamg

            ml = pyamg.smoothed_aggregation_solver(op.to_csr())
            self._precond = ml.aspreconditioner(cycle="V")
        else:
            self._inv_diag = 1.0 / op.diag

    def _apply_precond(self, r: np.ndarray) -> np.ndarray:
        if self.options.preconditioner == "amg":
            return np.asarray(self._precond.matvec(r.ravel())).reshape(r.shape)
        return self._inv_diag * r

    def solve(self, b: np.ndarray, x0: np.ndarray) -> tuple[np.ndarray, int, float]:
        """Solve A x = b from initial guess x0. Returns (x, iterations,
        relative residual)."""
        op, opts = self.op, self.options
        norm_b = float(np.linalg.norm(b))
        if norm_b == 0.0:
            return np.zeros_like(b), 0, 0.0

        x = np.array(x0, dtype=float, copy=True)
        r = b - op.matvec(x)
        rel = float(np.linalg.norm(r)) / norm_b
        if rel <= opts.tol:
            return x, 0, rel

        z = self._apply_precond(r)
        p = z.copy()
        rz = float(np.vdot(r, z))
        ap = np.empty_like(x)
        for it in range(1, opts.max_iter + 1):
            op.matvec(p, out=ap)
            pap = float(np.vdot(p, ap))
            if not np.isfinite(pap) or pap <= 0.0:
                raise SolverError(
                    f"conjugate gradients broke down at iteration {it} "
                    f"(p^T A p = {pap!r})")
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            rel = float(np.linalg.norm(r)) / norm_b
            if rel <= opts.tol:
                return x, it, rel
            z = self._apply_precond(r)
            rz_new = float(np.vdot(r, z))
            p *= rz_new / rz
            p += z
            rz = rz_new
        raise SolverError(
            f"conjugate gradients did not reach tol={opts.tol:g} within "
            f"{opts.max_iter} iterations (final relative residual {rel:.3e})")


def assemble_step(scenario: Scenario, phi_n: np.ndarray,
                  operator: StencilOperator | None = None):
    """One implicit step as an explicit sparse system ``(A, b)`` in flat cell
    order. ``operator`` can be passed to reuse an already-built stencil."""
    op = operator if operator is not None else build_operator(
        scenario.grid, scenario.props, scenario.perm, scenario.wells,
        scenario.dt)
    phi_n = np.asarray(phi_n, dtype=float).reshape(scenario.grid.shape)
    return op.to_csr(), op.rhs(phi_n).ravel()


def solve_linear(op: StencilOperator, b: np.ndarray,
                 x0: np.ndarray | None = None,
                 options: SolverOptions | None = None) -> np.ndarray:
    """One-off solve of ``A x = b`` for a stencil operator; see
    :class:`LinearSolver` for the loop reused across time steps."""
    b = np.asarray(b, dtype=float).reshape(op.grid.shape)
    if x0 is None:
        x0 = np.zeros_like(b)
    x, _, _ = LinearSolver(op, options or SolverOptions()).solve(
        b, np.asarray(x0, dtype=float).reshape(op.grid.shape))
    return x


@dataclass(frozen=True)
class Solution:
    """Forward-run results: potentials at every report time plus per-well
    rate and bottom-hole pressure histories."""

    scenario: Scenario
    options: SolverOptions
    potentials: np.ndarray       # (n_steps + 1, nx, ny, nz), Pa
    well_solutions: tuple[WellSolution, ...]
    diagnostics: StepDiagnostics

    @property
    def times(self) -> np.ndarray:
        return self.scenario.times

    @property
    def pressures(self) -> np.ndarray:
        """(n_steps + 1, nx, ny, nz) pressures, Pa."""
        sc = self.scenario
        return self.potentials + _depth_term(sc.grid, sc.props)[None]

    def field_rates(self) -> np.ndarray:
        """(n_steps,) total production rate over all wells, m^3/s (surface)."""
        if not self.well_solutions:
            return np.zeros(self.scenario.n_steps)
        return np.sum([ws.rates for ws in self.well_solutions], axis=0)

    def mass_balance_error(self) -> np.ndarray:
        """(n_steps,) relative volume-balance defect per step: storage change
        plus produced volume, normalized by the larger of the two."""
        sc = self.scenario
        acc_vol = (sc.props.porosity * sc.props.compressibility *
                   sc.grid.cell_volume / sc.props.formation_factor)
        d_phi = np.sum(np.diff(self.potentials, axis=0), axis=(1, 2, 3))
        storage = acc_vol * d_phi
        produced = self.field_rates() * sc.dt
        denom = np.maximum(np.abs(storage), np.abs(produced))
        err = np.abs(storage + produced)
        return np.divide(err, denom, out=np.zeros_like(err), where=denom > 0)


def run(scenario: Scenario, options: SolverOptions | None = None) -> Solution:
    """Run the implicit time loop and record per-step well quantities."""
    options = options or SolverOptions()
    sc = scenario
    op = build_operator(sc.grid, sc.props, sc.perm, sc.wells, sc.dt)
    solver = LinearSolver(op, options)

    n_steps = sc.n_steps
    phi = potential_from_pressure(
        init_hydrostatic(sc.grid, sc.props, sc.p_ref_top), sc.props, sc.grid)
    potentials = np.empty((n_steps + 1,) + sc.grid.shape)
    potentials[0] = phi

    n_wells = len(op.well_terms)
    rates = np.zeros((n_wells, n_steps))
    bhps = np.zeros((n_wells, n_steps))
    perf_rates = [np.zeros((n_steps, wt.well.n_perf)) for wt in op.well_terms]

    iters = np.zeros(n_steps, dtype=int)
    rel_res = np.zeros(n_steps)
    rhs_norms = np.zeros(n_steps)
    depth = _depth_term(sc.grid, sc.props)

    t0 = time.perf_counter()
    for n in range(n_steps):
        b = op.rhs(phi)
        rhs_norms[n] = np.linalg.norm(b)
        phi, iters[n], rel_res[n] = solver.solve(b, x0=phi)
        if not np.all(np.isfinite(phi)):
            raise SolverError(f"non-finite potential after step {n + 1}")
        potentials[n + 1] = phi

        for w_idx, wt in enumerate(op.well_terms):
            w = wt.well
            layers = w.perf_layers
            phi_perf = phi[w.i, w.j, layers]
            if wt.rate_alloc is not None:
                q_perf = wt.rate_alloc
            else:
                q_perf = wt.wi * (phi_perf - wt.phi_well)
            p_perf = phi_perf + depth[0, 0, layers]
            perf_rates[w_idx][n] = q_perf
            rates[w_idx, n] = q_perf.sum()
            bhps[w_idx, n] = wells_mod.report_bhp(
                w, p_perf, q_perf, wt.wi, sc.grid, sc.props)
    wall = time.perf_counter() - t0

    well_solutions = tuple(
        WellSolution(well=wt.well, rates=rates[i], perf_rates=perf_rates[i],
                     bhp=bhps[i])
        for i, wt in enumerate(op.well_terms))
    diagnostics = StepDiagnostics(iterations=iters, rel_residuals=rel_res,
                                  rhs_norms=rhs_norms, wall_time=wall)
    return Solution(scenario=sc, options=options, potentials=potentials,
                    well_solutions=well_solutions, diagnostics=diagnostics)
