"""Shared builders for the test suite.

Everything here is deliberately small: desk-scale grids solve in
milliseconds so the oracle tests (dense solves, hand arithmetic,
closed forms) stay fast while exercising the same code paths as the
field-scale runs in test_acceptance.py.
"""
from __future__ import annotations

import numpy as np
import pytest

from resflow import (
    FormationProps,
    Grid3D,
    Scenario,
    SolverOptions,
    UNITS,
    WellSpec,
    ConstantBHP,
    ConstantRate,
    report_for_solution,
)

# Reference formation: light oil in a shallow-dipping sand (the values every
# scenario in the suite shares unless a test overrides them).
POROSITY = 0.2
OIL_DENSITY = 849.0            # kg/m^3
VISCOSITY = 3.0e-3             # Pa*s  (3 mPa*s)
COMPRESSIBILITY = 1.0e-9       # 1/Pa  (1e-4 per bar)
FORMATION_FACTOR = 1.02
P_REF_TOP = 413.69e5           # Pa    (413.69 bar at the formation top)

# Field-scale domain used by the acceptance criteria.
FIELD_DIMS = (60, 220, 10)
FIELD_EXTENT = (365.76, 670.56, 51.82)   # m
FIELD_Z_TOP = 3657.6                     # m
FIELD_ETA = 152.4                        # m correlation length
FIELD_MEAN_LNK = 4.0                     # ln-mD
FIELD_VARIANCE = 0.5


def reference_props() -> FormationProps:
    return FormationProps(
        porosity=POROSITY,
        oil_density=OIL_DENSITY,
        viscosity=VISCOSITY,
        compressibility=COMPRESSIBILITY,
        formation_factor=FORMATION_FACTOR,
    )


def field_grid() -> Grid3D:
    nx, ny, nz = FIELD_DIMS
    lx, ly, lz = FIELD_EXTENT
    return Grid3D(nx=nx, ny=ny, nz=nz, lx=lx, ly=ly, lz=lz,
                  z_top=FIELD_Z_TOP)


def desk_grid(nx: int = 6, ny: int = 5, nz: int = 3,
              cell: float = 10.0) -> Grid3D:
    """Small uniform grid with 10 m cells (nondegenerate in every axis)."""
    return Grid3D(nx=nx, ny=ny, nz=nz,
                  lx=cell * nx, ly=cell * ny, lz=cell * nz)


def lognormal_perm(grid: Grid3D, seed: int, mean_lnk: float = 4.0,
                   sigma: float = 0.5) -> np.ndarray:
    """Uncorrelated lognormal permeability in m^2 (white noise is fine for
    solver/algebra tests; spatially correlated fields come from the
    KLE module where correlation matters)."""
    rng = np.random.default_rng(seed)
    lnk = mean_lnk + sigma * rng.standard_normal(grid.shape)
    return UNITS.perm_to_si(np.exp(lnk))


def uniform_perm(grid: Grid3D, k_md: float = 50.0) -> np.ndarray:
    return np.full(grid.shape, UNITS.perm_to_si(k_md))


def full_penetration_well(grid: Grid3D, i: int, j: int, control,
                          name: str = "") -> WellSpec:
    return WellSpec(i=i, j=j, k_top=0, k_bot=grid.nz - 1, control=control,
                    name=name)


def rate_scenario(grid: Grid3D | None = None, seed: int = 7,
                  q_m3_day: float = 20.0, dt_days: float = 1.0,
                  n_steps: int = 5) -> Scenario:
    """One rate-controlled producer near a corner of a desk grid."""
    grid = grid or desk_grid()
    well = full_penetration_well(
        grid, 1, 1, ConstantRate(q_sc=UNITS.rate_to_si(q_m3_day)), name="P1")
    return Scenario(grid=grid, props=reference_props(),
                    perm=lognormal_perm(grid, seed), wells=(well,),
                    p_ref_top=P_REF_TOP, dt=UNITS.time_to_si(dt_days),
                    n_steps=n_steps)


def bhp_scenario(grid: Grid3D | None = None, seed: int = 11,
                 bhp_bar: float = 350.0, dt_days: float = 1.0,
                 n_steps: int = 5) -> Scenario:
    """One BHP-controlled producer near a corner of a desk grid."""
    grid = grid or desk_grid()
    well = full_penetration_well(
        grid, 1, 1, ConstantBHP(bhp=UNITS.pressure_to_si(bhp_bar)),
        name="P1")
    return Scenario(grid=grid, props=reference_props(),
                    perm=lognormal_perm(grid, seed), wells=(well,),
                    p_ref_top=P_REF_TOP, dt=UNITS.time_to_si(dt_days),
                    n_steps=n_steps)


def four_spot_wells(grid: Grid3D, control_factory) -> tuple[WellSpec, ...]:
    """Four fully-penetrating wells placed at the quarter points."""
    qi, qj = max(grid.nx // 4, 1), max(grid.ny // 4, 1)
    spots = [(qi, qj), (grid.nx - 1 - qi, qj),
             (qi, grid.ny - 1 - qj), (grid.nx - 1 - qi, grid.ny - 1 - qj)]
    return tuple(
        full_penetration_well(grid, i, j, control_factory(), name=f"P{n+1}")
        for n, (i, j) in enumerate(spots))


FAST_SOLVE = SolverOptions(preconditioner="jacobi")


def keystone_margin(solution, report=None) -> tuple[float, float]:
    """(max |nondim residual|, ceiling implied by solver convergence).

    The conjugate-gradient loop stops at ||b - A x||_2 <= tol * ||b||_2, so
    every component of the raw residual is at most tol * ||b||_2; dividing by
    cell volume and applying the report's nondimensionalization gives the
    ceiling below (with the conventional 10x slack).
    """
    report = report if report is not None else report_for_solution(solution)
    sc = solution.scenario
    bound = (10.0 * solution.options.tol
             * float(solution.diagnostics.rhs_norms.max())
             / sc.grid.cell_volume * report.residual_scale)
    return report.max_abs_residual, bound


def assert_keystone(solution, report=None) -> None:
    got, bound = keystone_margin(solution, report)
    assert got <= bound, f"residual {got:.3e} exceeds ceiling {bound:.3e}"


@pytest.fixture(scope="session")
def props() -> FormationProps:
    return reference_props()


@pytest.fixture(scope="session")
def small_grid() -> Grid3D:
    return desk_grid()
