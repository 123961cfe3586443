"""Theory-guidance terms for candidate potential sequences.

Evaluates the discrete PDE residual, boundary-condition loss, data loss,
hard initial-condition transform, and their weighted total for any sequence
of potential snapshots — simulator output or surrogate prediction. The PDE
residual is computed with the exact operator from :mod:`resflow.discretize`,
so it agrees with the simulator's transmissibilities, well terms, and no-flow
stencil down to floating point.

Scaling conventions (recorded in every report so external consumers can
reproduce the arithmetic):

* potentials are nondimensionalized by ``phi_scale`` (the initial potential
  at the formation top),
* time by ``time_scale`` (the scenario horizon), mapping report times to
  ``t_norm`` in [0, 1],
* the physical residual (1/s) is multiplied by ``residual_scale =
  formation_factor * time_scale / (porosity * compressibility * phi_scale)``,
  which makes it the defect of the nondimensional equation and keeps training
  losses near unity.

Squared-sum losses are mean-normalized (divided by element count) by default;
``normalize="sum"`` gives the raw sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import FormationProps, Grid3D
from .discretize import StencilOperator, build_operator

__all__ = [
    "LossWeights", "NeumannFace", "DirichletCells", "ResidualReport",
    "outer_noflow_faces", "residual_scale", "pde_residual",
    "pde_residual_for_operator", "data_loss", "bc_loss", "hard_ic_transform",
    "total_loss", "evaluate_sequences", "report_for_solution",
]

_NORMALIZE_MODES = ("mean", "sum")


def _reduce_sq(values: np.ndarray, normalize: str) -> float:
    if normalize not in _NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {_NORMALIZE_MODES}")
    total = float(np.vdot(values, values).real)
    if normalize == "mean" and values.size:
        total /= values.size
    return total


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss components in the weighted total."""

    data: float = 1.0
    pde: float = 1.0
    bc: float = 1.0

    def __post_init__(self):
        if min(self.data, self.pde, self.bc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.data == self.pde == self.bc == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class NeumannFace:
    """One outer boundary face with a target one-sided normal gradient
    ``value`` (per meter; 0 for no-flow)."""

    axis: int          # 0 -> x, 1 -> y, 2 -> z
    side: str          # "low" | "high"
    value: float = 0.0

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1, or 2")
        if self.side not in ("low", "high"):
            raise ValueError("side must be 'low' or 'high'")


@dataclass(frozen=True)
class DirichletCells:
    """Cells (flat indices) with prescribed potential targets."""

    cells: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        cells = np.atleast_1d(np.asarray(self.cells, dtype=np.intp))
        values = np.broadcast_to(
            np.asarray(self.values, dtype=float), cells.shape).copy()
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "values", values)


def outer_noflow_faces(grid: Grid3D) -> tuple[NeumannFace, ...]:
    """All outer faces with zero-gradient targets. Axes with a single cell
    layer (no one-sided difference available) are skipped."""
    faces = []
    for axis, n in enumerate(grid.shape):
        if n >= 2:
            faces.append(NeumannFace(axis=axis, side="low"))
            faces.append(NeumannFace(axis=axis, side="high"))
    return tuple(faces)


def residual_scale(props: FormationProps, phi_scale: float,
                   time_scale: float) -> float:
    """Factor converting the physical residual (1/s) to the defect of the
    nondimensional equation."""
    return (props.formation_factor * time_scale /
            (props.porosity * props.compressibility * phi_scale))


def pde_residual_for_operator(op: StencilOperator,
                              phi_seq: np.ndarray) -> np.ndarray:
    """Physical PDE residual (1/s) of a potential sequence under an
    already-built stencil operator; shape (n_snapshots - 1, nx, ny, nz)."""
    phi_seq = np.asarray(phi_seq, dtype=float)
    expected = op.grid.shape
    if phi_seq.ndim != 4 or phi_seq.shape[1:] != expected:
        raise ValueError(
            f"phi_seq must have shape (n_snapshots, {expected[0]}, "
            f"{expected[1]}, {expected[2]}), got {phi_seq.shape}")
    if phi_seq.shape[0] < 2:
        raise ValueError("phi_seq needs at least two snapshots")
    out = np.empty((phi_seq.shape[0] - 1,) + expected)
    for n in range(out.shape[0]):
        out[n] = op.residual_field(phi_seq[n], phi_seq[n + 1])
    return out


def pde_residual(phi_seq: np.ndarray, perm: np.ndarray, wells,
                 props: FormationProps, grid: Grid3D, dt: float) -> np.ndarray:
    """Physical PDE residual (1/s) per (step, cell): flux divergence plus
    sources minus accumulation, with the simulator's exact discretization."""
    op = build_operator(grid, props, perm, wells, dt)
    return pde_residual_for_operator(op, phi_seq)


def data_loss(pred, ref, normalize: str = "mean") -> float:
    """Squared mismatch between predictions and references of equal shape."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return _reduce_sq(pred - ref, normalize)


def _face_gradient(phi: np.ndarray, grid: Grid3D, face: NeumannFace) -> np.ndarray:
    n = grid.shape[face.axis]
    if n < 2:
        raise ValueError(
            f"axis {face.axis} has {n} cell(s); a one-sided difference "
            "needs at least two")
    h = (grid.dx, grid.dy, grid.dz)[face.axis]
    lead = phi.ndim - 3  # leading snapshot axes
    ax = lead + face.axis
    if face.side == "low":
        a = np.take(phi, 1, axis=ax)
        b = np.take(phi, 0, axis=ax)
    else:
        a = np.take(phi, n - 1, axis=ax)
        b = np.take(phi, n - 2, axis=ax)
    return (a - b) / h


def bc_loss(phi_seq, grid: Grid3D, neumann_faces=(),
            dirichlet_cells: DirichletCells | None = None,
            normalize: str = "mean") -> float:
    """Boundary-condition loss: squared defect of one-sided normal gradients
    on Neumann faces plus squared potential mismatch on Dirichlet cells,
    accumulated over every snapshot in ``phi_seq``."""
    if normalize not in _NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {_NORMALIZE_MODES}")
    phi = np.asarray(phi_seq, dtype=float)
    if phi.ndim < 3 or phi.shape[-3:] != grid.shape:
        raise ValueError(
            f"phi_seq must end in grid shape {grid.shape}, got {phi.shape}")
    total = 0.0
    count = 0
    for face in neumann_faces:
        defect = _face_gradient(phi, grid, face) - face.value
        total += float(np.vdot(defect, defect).real)
        count += defect.size
    if dirichlet_cells is not None:
        flat = phi.reshape(phi.shape[:-3] + (grid.n_cells,))
        defect = flat[..., dirichlet_cells.cells] - dirichlet_cells.values
        total += float(np.vdot(defect, defect).real)
        count += defect.size
    if normalize == "mean" and count:
        total /= count
    return total


def hard_ic_transform(raw_out, phi0, t_norm):
    """Constrain a raw prediction so the initial condition holds exactly:
    ``phi0 * (1 - t_norm) - t_norm * raw_out``. At ``t_norm = 0`` the result
    is ``phi0`` regardless of ``raw_out``."""
    t = np.asarray(t_norm, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t_norm must lie in [0, 1]")
    return np.asarray(phi0, dtype=float) * (1.0 - t) - t * np.asarray(
        raw_out, dtype=float)


def total_loss(data: float, pde: float, bc: float,
               weights: LossWeights) -> float:
    """Weighted sum of the three non-negative loss components."""
    if min(data, pde, bc) < 0:
        raise ValueError("loss components must be non-negative")
    return weights.data * data + weights.pde * pde + weights.bc * bc


@dataclass(frozen=True)
class ResidualReport:
    """Nondimensional residual field plus the scalar loss components and the
    normalization/scaling constants needed to reproduce them externally."""

    residual: np.ndarray         # (n_seq, n_steps, nx, ny, nz), nondimensional
    loss_data: float
    loss_pde: float
    loss_bc: float
    loss_total: float
    weights: LossWeights
    n_real: int                  # realizations in the data term
    n_steps_data: int            # steps in the data term
    n_real_virtual: int          # sequences in the PDE term
    n_steps_virtual: int         # steps in the PDE term
    phi_scale: float             # Pa
    time_scale: float            # s
    residual_scale: float        # s (multiplies the 1/s residual)
    normalize: str

    @property
    def max_abs_residual(self) -> float:
        return float(np.abs(self.residual).max()) if self.residual.size else 0.0


def evaluate_sequences(grid: Grid3D, props: FormationProps, perm: np.ndarray,
                       wells, dt: float, phi_seqs: np.ndarray,
                       phi_scale: float, weights: LossWeights | None = None,
                       *, data_pred=None, data_ref=None, neumann_faces=None,
                       dirichlet_cells: DirichletCells | None = None,
                       normalize: str = "mean") -> ResidualReport:
    """Full loss evaluation for one or more potential sequences.

    ``phi_seqs`` has shape (n_seq, n_snapshots, nx, ny, nz) or
    (n_snapshots, nx, ny, nz) for a single sequence; snapshots are ``dt``
    apart, first snapshot at t = 0. ``neumann_faces=None`` applies zero-flux
    targets on every outer face; pass ``()`` to disable the boundary term.
    ``data_pred``/``data_ref`` (same shape, in Pa) feed the data term and are
    nondimensionalized by ``phi_scale`` like everything else.
    """
    weights = weights or LossWeights()
    phi_seqs = np.asarray(phi_seqs, dtype=float)
    if phi_seqs.ndim == 4:
        phi_seqs = phi_seqs[None]
    if phi_seqs.ndim != 5 or phi_seqs.shape[2:] != grid.shape:
        raise ValueError(
            f"phi_seqs must have shape (n_seq, n_snapshots, *{grid.shape}), "
            f"got {phi_seqs.shape}")
    if not phi_scale > 0:
        raise ValueError("phi_scale must be positive")
    n_seq, n_snap = phi_seqs.shape[:2]
    n_steps = n_snap - 1
    time_scale = n_steps * dt
    r_scale = residual_scale(props, phi_scale, time_scale)

    op = build_operator(grid, props, perm, wells, dt)
    residual = np.empty((n_seq, n_steps) + grid.shape)
    for s in range(n_seq):
        residual[s] = pde_residual_for_operator(op, phi_seqs[s])
    residual *= r_scale
    loss_pde = _reduce_sq(residual, normalize)

    if neumann_faces is None:
        neumann_faces = outer_noflow_faces(grid)
    if neumann_faces or dirichlet_cells is not None:
        scaled = DirichletCells(
            dirichlet_cells.cells, dirichlet_cells.values / phi_scale
        ) if dirichlet_cells is not None else None
        loss_bc = bc_loss(phi_seqs / phi_scale, grid, neumann_faces, scaled,
                          normalize)
    else:
        loss_bc = 0.0

    if (data_pred is None) != (data_ref is None):
        raise ValueError("data_pred and data_ref must be given together")
    if data_pred is not None:
        data_pred = np.asarray(data_pred, dtype=float)
        data_ref = np.asarray(data_ref, dtype=float)
        loss_data = data_loss(data_pred / phi_scale, data_ref / phi_scale,
                              normalize)
        n_real = data_ref.shape[0] if data_ref.ndim >= 1 else 1
        n_steps_data = data_ref.shape[1] if data_ref.ndim >= 2 else 1
    else:
        loss_data = 0.0
        n_real = 0
        n_steps_data = 0

    return ResidualReport(
        residual=residual, loss_data=loss_data, loss_pde=loss_pde,
        loss_bc=loss_bc,
        loss_total=total_loss(loss_data, loss_pde, loss_bc, weights),
        weights=weights, n_real=n_real, n_steps_data=n_steps_data,
        n_real_virtual=n_seq, n_steps_virtual=n_steps, phi_scale=phi_scale,
        time_scale=time_scale, residual_scale=r_scale, normalize=normalize)


def report_for_solution(solution, weights: LossWeights | None = None,
                        normalize: str = "mean") -> ResidualReport:
    """Residual report for a forward-simulation result, using its own initial
    formation-top potential as the scaling constant."""
    sc = solution.scenario
    return evaluate_sequences(sc.grid, sc.props, sc.perm, sc.wells, sc.dt,
                              solution.potentials, sc.p_ref_top,
                              weights=weights, normalize=normalize)
