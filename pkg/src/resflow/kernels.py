"""Hot numeric kernels: 7-point stencil apply on 3D cell arrays.

Two interchangeable implementations exist: a numba ``@njit`` version and a
vectorized pure-numpy fallback. Selection happens once at import time:
numba is used when importable unless the environment variable
``RESFLOW_NO_NUMBA`` is set to 1/true/yes/on. Both paths are exercised by the
test suite and compared by ``benchmarks/bench_kernels.py``.

Array layout: all operands are (nx, ny, nz) C-contiguous float64. ``tx`` holds
the transmissibility between cells (i, j, k) and (i+1, j, k), shape
(nx-1, ny, nz); ``ty`` and ``tz`` analogously along the other axes.
"""

from __future__ import annotations

import os

import numpy as np


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


NUMBA_DISABLED = _flag("RESFLOW_NO_NUMBA")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via RESFLOW_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def stencil_matvec_numpy(diag, tx, ty, tz, x, out=None):
    """y = A @ x for the 7-point operator (pure numpy path).

    A has ``diag`` on the diagonal and -t on each face connection; rows of A
    follow the flat (i*ny + j)*nz + k cell order.
    """
    if out is None:
        out = np.empty_like(x)
    np.multiply(diag, x, out=out)
    if tx.size:
        out[:-1] -= tx * x[1:]
        out[1:] -= tx * x[:-1]
    if ty.size:
        out[:, :-1] -= ty * x[:, 1:]
        out[:, 1:] -= ty * x[:, :-1]
    if tz.size:
        out[:, :, :-1] -= tz * x[:, :, 1:]
        out[:, :, 1:] -= tz * x[:, :, :-1]
    return out


if HAVE_NUMBA:

    @njit(cache=True, fastmath=False)
    def _stencil_matvec_impl(diag, tx, ty, tz, x, out):  # pragma: no cover
        nx, ny, nz = x.shape
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    acc = diag[i, j, k] * x[i, j, k]
                    if i > 0:
                        acc -= tx[i - 1, j, k] * x[i - 1, j, k]
                    if i < nx - 1:
                        acc -= tx[i, j, k] * x[i + 1, j, k]
                    if j > 0:
                        acc -= ty[i, j - 1, k] * x[i, j - 1, k]
                    if j < ny - 1:
                        acc -= ty[i, j, k] * x[i, j + 1, k]
                    if k > 0:
                        acc -= tz[i, j, k - 1] * x[i, j, k - 1]
                    if k < nz - 1:
                        acc -= tz[i, j, k] * x[i, j, k + 1]
                    out[i, j, k] = acc
        return out

    def stencil_matvec_numba(diag, tx, ty, tz, x, out=None):
        """y = A @ x for the 7-point operator (numba path)."""
        if out is None:
            out = np.empty_like(x)
        return _stencil_matvec_impl(diag, tx, ty, tz, x, out)

    stencil_matvec = stencil_matvec_numba
else:
    stencil_matvec_numba = None
    stencil_matvec = stencil_matvec_numpy


def active_path() -> str:
    """Name of the kernel path selected at import time."""
    return "numba" if HAVE_NUMBA else "numpy"
