"""Intrinsic Gaussian Markov random fields on the cell grid.

The spatial fields in the model get an intrinsic prior whose precision is
the graph Laplacian of the grid under 8-neighbor (queen) adjacency:
``Q = D - W`` with ``W`` the 0/1 adjacency and ``D`` the degree diagonal.
``Q`` is singular — constant fields cost nothing — so densities use the
generalized determinant (product of nonzero eigenvalues) and sampling is
done under a sum-to-zero constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericError
from .grids import GridSpec


def besag_precision(grid: GridSpec) -> sp.csc_matrix:
    """Queen-adjacency graph Laplacian for the grid's cell lattice.

    Cells are ordered row-major: cell (row y, col x) has index y*nx + x.
    Rows sum to zero; diagonal entries are the neighbor counts (3, 5, or 8
    for corner, edge, interior cells).
    """
    return _lattice_laplacian(grid.nx, grid.ny)


def _lattice_laplacian(nx: int, ny: int) -> sp.csc_matrix:
    if nx < 1 or ny < 1:
        raise ConfigError("grid dimensions must be >= 1")
    n = nx * ny
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny))
    xs, ys = xs.ravel(), ys.ravel()
    rows, cols = [], []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            ok = (
                (xs + dx >= 0) & (xs + dx < nx) & (ys + dy >= 0) & (ys + dy < ny)
            )
            rows.append(np.flatnonzero(ok))
            cols.append((ys[ok] + dy) * nx + (xs[ok] + dx))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    W = sp.coo_matrix((np.ones(r.size), (r, c)), shape=(n, n)).tocsc()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsc()


def _logdet_sparse_spd(M: sp.spmatrix) -> float:
    """log det of a sparse SPD matrix via LU (the SPD sign makes |diag U| valid)."""
    lu = spla.splu(M.tocsc())
    diag = lu.U.diagonal()
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        raise NumericError("singular or non-finite factor in sparse log-determinant")
    return float(np.sum(np.log(np.abs(diag))))


def log_gen_det(Q: sp.spmatrix) -> float:
    """Log of the product of the nonzero eigenvalues of a graph Laplacian.

    Uses the cofactor identity for Laplacians of connected graphs: the
    product of the n-1 nonzero eigenvalues equals n times the determinant
    of Q with one row and column deleted, which keeps everything sparse.
    For n = 1 the empty product is returned (0.0).
    """
    n = Q.shape[0]
    if n == 1:
        return 0.0
    minor = Q.tocsc()[:-1, :][:, :-1]
    try:
        return float(np.log(n)) + _logdet_sparse_spd(minor)
    except (RuntimeError, NumericError) as exc:
        raise NumericError(
            "generalized determinant needs a connected lattice "
            "(zero eigenvalue with multiplicity one)"
        ) from exc


@dataclass(frozen=True)
class ConstrainedGaussian:
    """An intrinsic field N(0, (tau*Q)^-) restricted to sum-to-zero.

    ``Q`` is the queen-adjacency Laplacian of an (nx, ny) lattice; the
    grid dimensions are carried instead of the matrix so the sampling
    factor can be cached.
    """

    nx: int
    ny: int
    tau: float

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"precision must be positive, got {self.tau}")

    @property
    def precision(self) -> sp.csc_matrix:
        return _lattice_laplacian(self.nx, self.ny).multiply(self.tau).tocsc()


@lru_cache(maxsize=4)
def _sampling_factor(nx: int, ny: int) -> np.ndarray:
    """Upper Cholesky factor of Q + (1/n) 11^T (a proper completion of Q).

    The rank-one shift only adds a unit eigenvalue along the constant
    vector, which the sum-to-zero projection removes again, so draws
    conditioned on the constraint have exactly the intrinsic covariance
    pinv(Q). Dense is fine here: sampling happens only at simulation
    scale, never inside the fit path.
    """
    Q = _lattice_laplacian(nx, ny).toarray()
    n = Q.shape[0]
    Qtilde = Q + np.full((n, n), 1.0 / n)
    return scipy.linalg.cholesky(Qtilde, lower=False)


def sample_constrained(
    g: ConstrainedGaussian, rng: np.random.Generator | int, size: int = 1
) -> np.ndarray:
    """Draws from the intrinsic field, each summing to zero.

    Returns shape (size, nx*ny); the ensemble covariance is pinv(Q)/tau.
    Sampling solves ``R x = z`` with ``R`` the Cholesky factor of the
    completed precision, then centers — centering is exactly conditioning
    on the constraint because the completion is flat along the constant
    vector. Deterministic given the seed / generator state.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    R = _sampling_factor(g.nx, g.ny)
    n = R.shape[0]
    z = rng.standard_normal((n, size))
    x = scipy.linalg.solve_triangular(R, z, lower=False)
    x = x / np.sqrt(g.tau)
    x -= x.mean(axis=0, keepdims=True)
    return np.ascontiguousarray(x.T)
