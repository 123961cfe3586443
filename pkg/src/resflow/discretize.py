"""Shared fully implicit 7-point discretization of the potential equation.

Both the forward simulator and the physics-residual evaluator are built on
the operator assembled here, which guarantees they agree on transmissibilities,
well terms, and boundary treatment down to floating point.

Per cell, the implicit step solves (units m^3/s after multiplying the balance
by the cell volume):

    acc * phi_new - sum_faces T * (phi_nbr_new - phi_new) + q_out(phi_new)
        = acc * phi_old - q_rate

with ``acc = porosity * compressibility * V / (formation_factor * dt)``.
No-flow outer boundaries arise from omitting exterior connections. Production
enters as a negative source: rate-controlled wells subtract their allocated
per-perforation rates from the right-hand side; BHP-controlled wells
contribute ``WI`` to the diagonal and ``WI * phi_well`` to the right-hand
side, with the wellbore potential reduced from the surface BHP through a
constant-density hydrostatic column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, wells as wells_mod
from .core_model import FormationProps, Grid3D
from .wells import ConstantBHP, ConstantRate, WellSpec


def transmissibility(k1, k2, area: float, dist: float, mu: float,
                     b_o: float):
    """Face transmissibility with harmonic-mean permeability:
    (2*k1*k2/(k1+k2)) * area / (mu * b_o * dist). Zero when both cells seal."""
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    s = k1 + k2
    harm = np.divide(2.0 * k1 * k2, s, out=np.zeros_like(s), where=s > 0)
    return harm * area / (mu * b_o * dist)


@dataclass(frozen=True)
class WellTerms:
    """Precomputed per-well coupling arrays for one operator."""

    well: WellSpec
    flat_cells: np.ndarray       # (n_perf,) flat cell indices
    wi: np.ndarray               # (n_perf,) Peaceman indices, m^3/(Pa*s)
    rate_alloc: np.ndarray | None    # fixed per-perf rates (rate control)
    phi_well: float | None           # wellbore potential (BHP control)


@dataclass(frozen=True)
class StencilOperator:
    """Assembled implicit-step operator A together with the pieces needed to
    form the right-hand side for any previous-step potential."""

    grid: Grid3D
    props: FormationProps
    dt: float
    diag: np.ndarray             # (nx, ny, nz) incl. accumulation and WI
    tx: np.ndarray               # (nx-1, ny, nz)
    ty: np.ndarray               # (nx, ny-1, nz)
    tz: np.ndarray               # (nx, ny, nz-1)
    acc: float                   # accumulation coefficient, m^3/(Pa*s)
    b_well: np.ndarray           # (nx, ny, nz) time-invariant well RHS
    well_terms: tuple[WellTerms, ...] = field(default=())

    def matvec(self, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        return kernels.stencil_matvec(self.diag, self.tx, self.ty, self.tz,
                                      x, out)

    def rhs(self, phi_old: np.ndarray) -> np.ndarray:
        """Right-hand side of the implicit step given the previous potential."""
        return self.acc * phi_old + self.b_well

    def residual_field(self, phi_old: np.ndarray,
                       phi_new: np.ndarray) -> np.ndarray:
        """Pointwise balance defect of (phi_old -> phi_new), per unit volume
        (1/s): flux divergence plus sources minus accumulation. Exactly
        (rhs - A @ phi_new) / V."""
        r = self.rhs(phi_old)
        r -= self.matvec(phi_new)
        r /= self.grid.cell_volume
        return r

    def to_csr(self):
        """Assemble the operator as a scipy CSR matrix (flat cell order)."""
        import scipy.sparse as sp

        g = self.grid
        n = g.n_cells
        idx = np.arange(n).reshape(g.shape)
        rows = [idx.reshape(-1)]
        cols = [idx.reshape(-1)]
        vals = [self.diag.reshape(-1)]
        for a, b, t in ((idx[:-1], idx[1:], self.tx),
                        (idx[:, :-1], idx[:, 1:], self.ty),
                        (idx[:, :, :-1], idx[:, :, 1:], self.tz)):
            if t.size == 0:
                continue
            af, bf, tf = a.reshape(-1), b.reshape(-1), t.reshape(-1)
            rows += [af, bf]
            cols += [bf, af]
            vals += [-tf, -tf]
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


def build_operator(grid: Grid3D, props: FormationProps, perm: np.ndarray,
                   well_list, dt: float) -> StencilOperator:
    """Assemble the implicit-step operator for one scenario.

    ``perm`` is per-cell isotropic permeability in m^2, strictly positive.
    Raises on invalid well placement, overlapping perforations, or a wellbore
    radius that reaches the cell drainage radius.
    """
    perm = np.ascontiguousarray(perm, dtype=float).reshape(grid.shape)
    if not np.all(perm > 0):
        raise ValueError("permeability must be strictly positive everywhere")
    if not dt > 0:
        raise ValueError("dt must be positive")

    mu, b_o = props.viscosity, props.formation_factor
    dx, dy, dz = grid.dx, grid.dy, grid.dz

    tx = transmissibility(perm[:-1], perm[1:], dy * dz, dx, mu, b_o)
    ty = transmissibility(perm[:, :-1], perm[:, 1:], dx * dz, dy, mu, b_o)
    tz = transmissibility(perm[:, :, :-1], perm[:, :, 1:], dx * dy, dz, mu, b_o)

    volume = grid.cell_volume
    acc = props.porosity * props.compressibility * volume / (b_o * dt)

    diag = np.full(grid.shape, acc)
    if tx.size:
        diag[:-1] += tx
        diag[1:] += tx
    if ty.size:
        diag[:, :-1] += ty
        diag[:, 1:] += ty
    if tz.size:
        diag[:, :, :-1] += tz
        diag[:, :, 1:] += tz

    # reject wells sharing a cell before touching the matrix
    wells_mod.well_image(grid, well_list)

    b_well = np.zeros(grid.shape)
    terms = []
    for w in well_list:
        w.validate(grid)
        layers = w.perf_layers
        flat = grid.flat_index(w.i, w.j, layers)
        wi = wells_mod.perf_well_indices(w, perm, grid, props)
        if isinstance(w.control, ConstantRate):
            alloc = wells_mod.allocate_rate(
                w.control.q_sc, perm[w.i, w.j, w.k_top:w.k_bot + 1])
            b_well[w.i, w.j, layers] -= alloc
            terms.append(WellTerms(well=w, flat_cells=flat, wi=wi,
                                   rate_alloc=alloc, phi_well=None))
        elif isinstance(w.control, ConstantBHP):
            phi_well = wells_mod.bhp_potential(w, grid, props, w.control.bhp)
            diag[w.i, w.j, layers] += wi
            b_well[w.i, w.j, layers] += wi * phi_well
            terms.append(WellTerms(well=w, flat_cells=flat, wi=wi,
                                   rate_alloc=None, phi_well=phi_well))
        else:
            raise TypeError(f"unknown well control {type(w.control).__name__}")

    return StencilOperator(grid=grid, props=props, dt=dt, diag=diag,
                           tx=tx, ty=ty, tz=tz, acc=acc, b_well=b_well,
                           well_terms=tuple(terms))
