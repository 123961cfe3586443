"""Grid geometry, rock/fluid properties, unit conversions, and field containers.

All internal computation is SI (m, Pa, s, m^2 for permeability). Field units
(mD, bar, m^3/day) appear only at I/O boundaries via :class:`UnitRegistry`.

Depth is measured positive downward. The potential datum sits at the formation
top ``z_top``; cell centers of layer ``k`` lie at ``z_top + (k + 0.5) * dz``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class UnitRegistry:
    """Fixed conversion constants between field units and SI."""

    md_to_m2: float = 9.869233e-16
    bar_to_pa: float = 1.0e5
    day_to_s: float = 86400.0
    mpas_to_pas: float = 1.0e-3

    def perm_to_si(self, k_md):
        return np.asarray(k_md, dtype=float) * self.md_to_m2

    def perm_from_si(self, k_m2):
        return np.asarray(k_m2, dtype=float) / self.md_to_m2

    def pressure_to_si(self, p_bar):
        return np.asarray(p_bar, dtype=float) * self.bar_to_pa

    def pressure_from_si(self, p_pa):
        return np.asarray(p_pa, dtype=float) / self.bar_to_pa

    def time_to_si(self, t_days):
        return np.asarray(t_days, dtype=float) * self.day_to_s

    def time_from_si(self, t_s):
        return np.asarray(t_s, dtype=float) / self.day_to_s

    def rate_to_si(self, q_m3_per_day):
        return np.asarray(q_m3_per_day, dtype=float) / self.day_to_s

    def rate_from_si(self, q_m3_per_s):
        return np.asarray(q_m3_per_s, dtype=float) * self.day_to_s

    def viscosity_to_si(self, mu_mpas):
        return np.asarray(mu_mpas, dtype=float) * self.mpas_to_pas

    def compressibility_to_si(self, c_per_bar):
        return np.asarray(c_per_bar, dtype=float) / self.bar_to_pa


UNITS = UnitRegistry()


@dataclass(frozen=True)
class Grid3D:
    """Uniform Cartesian grid: ``nx * ny * nz`` cells over extents lx, ly, lz (m)."""

    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float
    z_top: float = 0.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ValueError(f"{name} must be a positive integer, got {n!r}")
        for name in ("lx", "ly", "lz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def dz(self) -> float:
        return self.lz / self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def contains(self, i: int, j: int, k: int) -> bool:
        return 0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz

    def flat_index(self, i, j, k):
        """Flat offset (i*ny + j)*nz + k; k varies fastest."""
        return (np.asarray(i) * self.ny + np.asarray(j)) * self.nz + np.asarray(k)

    def unflat_index(self, flat):
        flat = np.asarray(flat)
        k = flat % self.nz
        j = (flat // self.nz) % self.ny
        i = flat // (self.nz * self.ny)
        return i, j, k

    def cell_depth(self, k):
        """Absolute depth of layer-k cell centers (m, positive downward)."""
        return self.z_top + (np.asarray(k, dtype=float) + 0.5) * self.dz

    def depth_below_datum(self):
        """(nz,) depths of cell centers below the formation-top datum."""
        return (np.arange(self.nz) + 0.5) * self.dz


@dataclass(frozen=True)
class FormationProps:
    """Rock and fluid constants, SI. Density is the standard-condition value;
    its pressure dependence is folded into the compressibility."""

    porosity: float
    oil_density: float          # kg/m^3
    viscosity: float            # Pa*s
    compressibility: float      # 1/Pa
    formation_factor: float     # reservoir/surface volume ratio
    gravity: float = 9.81       # m/s^2

    def __post_init__(self):
        if not 0.0 < self.porosity < 1.0:
            raise ValueError("porosity must lie in (0, 1)")
        for name in ("oil_density", "viscosity", "compressibility",
                     "formation_factor", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ScalarField3D:
    """One scalar per cell on a Grid3D. Values are stored as a (nx, ny, nz)
    C-contiguous array, so the flat view follows the (i*ny + j)*nz + k order."""

    grid: Grid3D
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            if v.size != self.grid.n_cells:
                raise ValueError(
                    f"values size {v.size} != cell count {self.grid.n_cells}")
            v = v.reshape(self.grid.shape)
        object.__setattr__(self, "values", v)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, grid: Grid3D, flat: np.ndarray) -> "ScalarField3D":
        return cls(grid, np.asarray(flat, dtype=float).reshape(grid.shape))


def _depth_term(grid: Grid3D, props: FormationProps) -> np.ndarray:
    # rho*g*(z - z_top) per layer, broadcastable over (nx, ny, nz)
    return (props.oil_density * props.gravity *
            grid.depth_below_datum())[None, None, :]


def potential_from_pressure(pressure: np.ndarray, props: FormationProps,
                            grid: Grid3D) -> np.ndarray:
    """Gravity-adjusted potential: p - rho*g*(z - z_top), datum at z_top."""
    p = np.asarray(pressure, dtype=float).reshape(grid.shape)
    return p - _depth_term(grid, props)


def pressure_from_potential(potential: np.ndarray, props: FormationProps,
                            grid: Grid3D) -> np.ndarray:
    """Exact inverse of :func:`potential_from_pressure`."""
    phi = np.asarray(potential, dtype=float).reshape(grid.shape)
    return phi + _depth_term(grid, props)


def init_hydrostatic(grid: Grid3D, props: FormationProps,
                     p_ref_top: float) -> np.ndarray:
    """Gravitationally stabilized pressure field with reference pressure
    ``p_ref_top`` (Pa) at the formation-top datum. The corresponding potential
    field is spatially uniform and equals ``p_ref_top``."""
    if not p_ref_top > 0:
        raise ValueError("p_ref_top must be positive")
    p = np.full(grid.shape, float(p_ref_top))
    return p + _depth_term(grid, props)
