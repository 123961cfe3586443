"""Well geometry, controls, Peaceman inflow model, and rate allocation.

Sign convention: production is positive. A perforation produces at
``q = WI * (p_cell - p_well)``, so fluid leaves the reservoir when the cell
pressure exceeds the wellbore pressure.

Rate-controlled wells distribute their surface rate over perforations in
proportion to cell permeability; the allocation is pressure-independent, so
the resulting source terms are constant within a timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core_model import FormationProps, Grid3D, ScalarField3D


@dataclass(frozen=True)
class ConstantRate:
    """Surface volumetric production rate, m^3/s (positive = production)."""

    q_sc: float


@dataclass(frozen=True)
class ConstantBHP:
    """Bottom hole pressure held fixed, Pa, referenced at the top perforation."""

    bhp: float

    def __post_init__(self):
        if not self.bhp > 0:
            raise ValueError("bhp must be positive")


WellControl = Union[ConstantRate, ConstantBHP]


@dataclass(frozen=True)
class WellSpec:
    """Vertical well perforating layers ``k_top..k_bot`` (inclusive) of column
    (i, j). Indices are 0-based here; configuration files use 1-based."""

    i: int
    j: int
    k_top: int
    k_bot: int
    control: WellControl
    r_w: float = 0.1
    name: str = ""

    def __post_init__(self):
        if self.k_top > self.k_bot:
            raise ValueError("k_top must be <= k_bot")
        if not self.r_w > 0:
            raise ValueError("r_w must be positive")

    @property
    def n_perf(self) -> int:
        return self.k_bot - self.k_top + 1

    @property
    def perf_layers(self) -> np.ndarray:
        return np.arange(self.k_top, self.k_bot + 1)

    def validate(self, grid: Grid3D) -> None:
        if not (0 <= self.i < grid.nx and 0 <= self.j < grid.ny):
            raise ValueError(
                f"well {self.name or (self.i, self.j)} outside grid in (i, j)")
        if not (0 <= self.k_top and self.k_bot < grid.nz):
            raise ValueError(
                f"well {self.name or (self.i, self.j)} perforation range "
                f"[{self.k_top}, {self.k_bot}] outside [0, {grid.nz - 1}]")


@dataclass
class WellSolution:
    """Per-timestep results for one well. ``rates`` is the total surface rate
    (m^3/s, production positive), ``perf_rates`` the per-perforation split,
    ``bhp`` the reported bottom hole pressure (Pa) at the top perforation."""

    well: WellSpec
    rates: np.ndarray        # (n_steps,)
    perf_rates: np.ndarray   # (n_steps, n_perf)
    bhp: np.ndarray          # (n_steps,)


def drainage_radius(kx: float, ky: float, dx: float, dy: float) -> float:
    """Equivalent drainage radius of a vertical well in a dx-by-dy cell:
    0.28 * sqrt(ky*dx^2 + kx*dy^2) / (sqrt(kx) + sqrt(ky)).

    For kx == ky this reduces to 0.28 * sqrt(dx^2 + dy^2) / 2.
    """
    if not (kx > 0 and ky > 0):
        raise ValueError("permeabilities must be strictly positive")
    return 0.28 * math.sqrt(ky * dx * dx + kx * dy * dy) / (
        math.sqrt(kx) + math.sqrt(ky))


def well_index(kx: float, ky: float, dz: float, r_0: float, r_w: float,
               mu: float) -> float:
    """Peaceman well index 2*pi*dz*sqrt(kx*ky) / (mu * ln(r_0/r_w)), in
    m^3/(Pa*s). Requires r_0 > r_w."""
    if not r_0 > r_w:
        raise ValueError(
            f"drainage radius {r_0:.4g} must exceed wellbore radius {r_w:.4g}")
    return 2.0 * math.pi * dz * math.sqrt(kx * ky) / (mu * math.log(r_0 / r_w))


def allocate_rate(q_total: float, perf_perms) -> np.ndarray:
    """Split a total rate over perforations proportionally to permeability.

    The last entry absorbs the rounding of the proportional split so that
    summing the result left to right (Python's ``sum``) reproduces
    ``q_total`` bitwise. The plain remainder ``q_total - prefix`` already
    guarantees that whenever the prefix lies in ``[q_total/2, 2*q_total]``
    (the subtraction is then exact); outside that window the final addition
    itself rounds, so the remainder is nudged by ulps until the sum lands
    exactly — and there the remainder is at least ``q_total/2`` in
    magnitude, so a handful of nudges always suffices.
    """
    perms = np.asarray(perf_perms, dtype=float)
    if perms.size == 0:
        raise ValueError("at least one perforation required")
    total = perms.sum()
    if total <= 0:
        raise ValueError("all perforation permeabilities are zero")
    q_total = float(q_total)
    q = q_total * perms / total
    n = q.size
    if n == 1:
        q[0] = q_total
        return q
    for attempt in range(128):
        prefix = 0.0
        for v in q[:-1]:
            prefix += float(v)
        rest = q_total - prefix
        for _ in range(8):
            if prefix + rest == q_total:
                q[-1] = rest
                return q
            rest = math.nextafter(
                rest, math.inf if prefix + rest < q_total else -math.inf)
        # Rare: the prefix sits exactly on a round-to-even tie of q_total's
        # ulp grid, so no remainder can land the sum on q_total (possible
        # when the last perforation carries most of the total). Perturb one
        # leading share by an ulp-of-the-prefix-scale amount — largest
        # shares first, growing steps — to shift the alignment, and retry.
        order = np.argsort(-np.abs(q[:-1]))
        j = int(order[attempt % (n - 1)])
        step = (1 + attempt // (n - 1)) * math.ulp(prefix)
        q[j] = float(q[j]) + math.copysign(step, q_total)
    raise AssertionError("rate allocation failed to close")


def perf_well_indices(well: WellSpec, perm: np.ndarray, grid: Grid3D,
                      props: FormationProps) -> np.ndarray:
    """Peaceman WI for every perforated cell of a well (isotropic per-cell k).
    Raises if the wellbore radius reaches the drainage radius anywhere."""
    k_col = perm[well.i, well.j, well.k_top:well.k_bot + 1]
    wi = np.empty(well.n_perf)
    for idx, k in enumerate(k_col):
        r_0 = drainage_radius(k, k, grid.dx, grid.dy)
        wi[idx] = well_index(k, k, grid.dz, r_0, well.r_w, props.viscosity)
    return wi


def bhp_potential(well: WellSpec, grid: Grid3D, props: FormationProps,
                  bhp: float) -> float:
    """Wellbore potential equivalent of a BHP referenced at the top
    perforation. With a constant-density hydrostatic wellbore column the
    potential is the same at every perforation:
    bhp - rho*g*(z_topperf - z_top)."""
    z_rel = (well.k_top + 0.5) * grid.dz
    return bhp - props.oil_density * props.gravity * z_rel


def report_bhp(well: WellSpec, perf_pressures, perf_rates, perf_wi,
               grid: Grid3D, props: FormationProps) -> float:
    """Reported BHP for a rate-controlled well: invert the inflow relation per
    perforation, shift each value to the top-perforation datum through the
    hydrostatic wellbore column, and average."""
    p = np.asarray(perf_pressures, dtype=float)
    q = np.asarray(perf_rates, dtype=float)
    wi = np.asarray(perf_wi, dtype=float)
    if np.any(wi <= 0):
        raise ValueError("well index must be positive for BHP reporting")
    layers = well.perf_layers
    z_shift = (layers - well.k_top) * grid.dz
    bhp_local = p - q / wi
    bhp_datum = bhp_local - props.oil_density * props.gravity * z_shift
    return float(bhp_datum.mean())


def well_image(grid: Grid3D, wells) -> ScalarField3D:
    """Binary field marking perforated cells. Distinct wells may not share a
    cell; overlapping perforations are rejected."""
    img = np.zeros(grid.shape)
    for w in wells:
        w.validate(grid)
        col = img[w.i, w.j, w.k_top:w.k_bot + 1]
        if np.any(col > 0):
            raise ValueError(
                f"overlapping perforations at column (i={w.i}, j={w.j})")
        img[w.i, w.j, w.k_top:w.k_bot + 1] = 1.0
    return ScalarField3D(grid, img)
