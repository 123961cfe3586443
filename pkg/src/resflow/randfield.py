"""Gaussian log-permeability fields via truncated Karhunen-Loeve expansion.

The covariance is separable exponential,
``C(x, x') = sigma2 * exp(-|x1-x2|/eta_x - |y1-y2|/eta_y - |z1-z2|/eta_z)``,
evaluated at cell centers. Separability lets the 3D eigenproblem factor into
three small 1D symmetric eigenproblems: 3D eigenvalues are products of 1D
eigenvalues (times sigma2) and 3D eigenvectors are outer products of 1D
eigenvectors. Eigenvectors are orthonormal under the plain dot product over
cells (the grid is uniform, so no volume weighting is needed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import Grid3D, ScalarField3D


@dataclass(frozen=True)
class CovarianceSpec:
    """Log-permeability statistics: mean of ln K (in ln-mD), variance of the
    fluctuation, and per-axis correlation lengths in meters."""

    mean_lnk: float
    variance: float
    eta_x: float
    eta_y: float
    eta_z: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")
        for name in ("eta_x", "eta_y", "eta_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def eta(self, axis: int) -> float:
        return (self.eta_x, self.eta_y, self.eta_z)[axis]


@dataclass(frozen=True)
class KleBasis:
    """Truncated eigenpairs of the discrete covariance.

    ``eigenvalues`` are sorted descending (tiny negatives clipped to 0);
    ``axis_modes`` stores, per retained 3D mode, the (ix, iy, iz) indices into
    the per-axis 1D eigenvector tables ``vec_x/vec_y/vec_z``. 3D eigenvectors
    are materialized lazily as outer products to keep memory at
    O(n_modes + nx^2 + ny^2 + nz^2).
    """

    grid: Grid3D
    eigenvalues: np.ndarray        # (n_modes,)
    axis_modes: np.ndarray         # (n_modes, 3) int
    vec_x: np.ndarray              # (nx, nx) columns are 1D eigenvectors
    vec_y: np.ndarray
    vec_z: np.ndarray
    total_variance: float

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def eigenvector(self, m: int) -> np.ndarray:
        """m-th 3D eigenvector as a (nx, ny, nz) array, unit dot-norm."""
        ix, iy, iz = self.axis_modes[m]
        return np.einsum("i,j,k->ijk", self.vec_x[:, ix], self.vec_y[:, iy],
                         self.vec_z[:, iz])

    def mode_matrix(self) -> np.ndarray:
        """(n_modes, n_cells) matrix of flattened eigenvectors."""
        out = np.empty((self.n_modes, self.grid.n_cells))
        for m in range(self.n_modes):
            out[m] = self.eigenvector(m).reshape(-1)
        return out


@dataclass(frozen=True)
class KleSample:
    """Standard-normal coefficient vector parameterizing one realization."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        if not np.all(np.isfinite(xi)):
            raise ValueError("xi entries must be finite")
        object.__setattr__(self, "xi", xi)

    @property
    def n_modes(self) -> int:
        return len(self.xi)


def _axis_eigh(n: int, spacing: float, eta: float):
    """Eigendecomposition of the 1D exponential covariance at cell centers,
    sorted descending with tiny negative eigenvalues clipped to zero."""
    centers = (np.arange(n) + 0.5) * spacing
    cov = np.exp(-np.abs(centers[:, None] - centers[None, :]) / eta)
    w, v = np.linalg.eigh(cov)
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    w[w < 0] = 0.0
    # fix eigenvector sign for deterministic output: first nonzero entry >= 0
    for col in range(n):
        nz = np.nonzero(np.abs(v[:, col]) > 1e-12)[0]
        if nz.size and v[nz[0], col] < 0:
            v[:, col] = -v[:, col]
    return w, v


def build_basis(grid: Grid3D, cov: CovarianceSpec, n_modes: int) -> KleBasis:
    """Top ``n_modes`` eigenpairs of the discrete separable covariance.

    Ties in the 3D eigenvalue are broken by descending per-axis eigenvalue
    (x, then y, then z), then by ascending axis mode indices, so the ordering
    is deterministic.
    """
    if not 1 <= n_modes <= grid.n_cells:
        raise ValueError(
            f"n_modes must lie in [1, {grid.n_cells}], got {n_modes}")
    if cov.variance == 0:
        raise ValueError("degenerate covariance: variance is zero")

    wx, vx = _axis_eigh(grid.nx, grid.dx, cov.eta_x)
    wy, vy = _axis_eigh(grid.ny, grid.dy, cov.eta_y)
    wz, vz = _axis_eigh(grid.nz, grid.dz, cov.eta_z)

    lam = cov.variance * wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
    flat = lam.reshape(-1)

    ix, iy, iz = np.unravel_index(np.arange(flat.size), lam.shape)
    order = np.lexsort((iz, iy, ix, -wz[iz], -wy[iy], -wx[ix], -flat))
    top = order[:n_modes]

    eigenvalues = flat[top]
    axis_modes = np.stack([ix[top], iy[top], iz[top]], axis=1)
    total_variance = cov.variance * grid.n_cells
    return KleBasis(grid=grid, eigenvalues=eigenvalues, axis_modes=axis_modes,
                    vec_x=vx, vec_y=vy, vec_z=vz,
                    total_variance=total_variance)


def energy_fraction(basis: KleBasis, m: int) -> float:
    """Fraction of total field variance captured by the first m modes."""
    if not 1 <= m <= basis.n_modes:
        raise ValueError(f"m must lie in [1, {basis.n_modes}], got {m}")
    return float(basis.eigenvalues[:m].sum() / basis.total_variance)


def sample_field(basis: KleBasis, sample: KleSample,
                 cov: CovarianceSpec) -> ScalarField3D:
    """Reconstruct one ln-permeability realization (ln-mD):
    Z = mean + sum_i sqrt(lambda_i) * f_i * xi_i."""
    if sample.n_modes != basis.n_modes:
        raise ValueError(
            f"sample has {sample.n_modes} coefficients, basis has "
            f"{basis.n_modes} modes")
    z = np.full(basis.grid.shape, float(cov.mean_lnk))
    coeff = np.sqrt(basis.eigenvalues) * sample.xi
    for m in range(basis.n_modes):
        if coeff[m] != 0.0:
            ix, iy, iz = basis.axis_modes[m]
            z += coeff[m] * np.einsum(
                "i,j,k->ijk", basis.vec_x[:, ix], basis.vec_y[:, iy],
                basis.vec_z[:, iz])
    return ScalarField3D(basis.grid, z)


def truncated_pointwise_variance(basis: KleBasis) -> np.ndarray:
    """Analytic pointwise variance of the truncated expansion:
    sum_i lambda_i * f_i(x)^2, as a (nx, ny, nz) array."""
    out = np.zeros(basis.grid.shape)
    for m in range(basis.n_modes):
        out += basis.eigenvalues[m] * basis.eigenvector(m) ** 2
    return out


def draw_samples(rng_seed: int, n: int, n_modes: int) -> list[KleSample]:
    """n i.i.d. standard-normal coefficient vectors; deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return [KleSample(rng.standard_normal(n_modes)) for _ in range(n)]
