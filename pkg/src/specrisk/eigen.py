"""Principal components of sample correlation (or covariance) matrices.

Two routes, both working off the N x (M+1) return matrix and never forming
the N x N matrix:

* ``eigen_no_iter`` rotates the first M demeaned columns by the closed-form
  Cholesky factor of phi, eigensolves the small M x M Gram matrix and maps
  the eigenvectors back. Cost O(M^2 N).
* ``eigen_power`` runs power iterations with deflation, one pair at a time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError, NumericalError
from .moments import ReturnsPanel

# small-matrix eigenvalues at or below this (relative to max(1, largest)) are null
RANK_TOL = 1e-12
# ratio convergence test skips components this close to zero
_RATIO_GUARD = 1e-300
_SIGN_TOL = 1e-12


@dataclass(frozen=True)
class EigenSystem:
    """Descending eigenvalues with orthonormal eigenvectors as columns.

    ``m`` is the number of return observations minus one when known; it caps
    the factor count during K selection. ``dropped`` counts null pairs
    removed by the iteration-free solver.
    """

    values: np.ndarray
    vectors: np.ndarray
    iter_counts: np.ndarray | None = None
    m: int | None = None
    dropped: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[1] != values.shape[0]:
            raise DataError("eigenvector matrix does not match the number of eigenvalues")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return self.values.shape[0]


def canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the first component with |v| > 1e-12 is positive."""
    v = np.array(vectors, dtype=float)
    for a in range(v.shape[1]):
        nz = np.flatnonzero(np.abs(v[:, a]) > _SIGN_TOL)
        if nz.size and v[nz[0], a] < 0:
            v[:, a] = -v[:, a]
    return v


def _returns_array(returns) -> np.ndarray:
    if isinstance(returns, ReturnsPanel):
        return returns.values
    r = np.asarray(returns, dtype=float)
    if r.ndim != 2 or r.shape[0] < 2 or r.shape[1] < 2:
        raise DataError(f"returns must be N x (M+1) with N, M+1 >= 2, got shape {r.shape}")
    return r


def phi_cholesky(m: int) -> np.ndarray:
    """Lower-triangular factor c with c c^T = (I + u u^T)/M, in closed form.

    Diagonal sqrt((s+1)/(s M)); below the diagonal, column s' holds
    1/sqrt(s'(s'+1) M). Indices s, s' are 1-based.
    """
    if m < 1:
        raise DataError("M must be at least 1")
    s = np.arange(1, m + 1, dtype=float)
    c = np.tril(np.ones((m, m)), -1) / np.sqrt(s * (s + 1) * m)[None, :]
    c[np.diag_indices(m)] = np.sqrt((s + 1) / (s * m))
    return c


def dense_sym_eigen(a) -> EigenSystem:
    """Full spectrum of a symmetric matrix, descending, canonical signs."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError("matrix must be square")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise DataError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(-w, kind="stable")
    return EigenSystem(w[order], canonical_signs(v[:, order]))


def eigen_no_iter(returns, use_cor: bool = True) -> EigenSystem:
    """The M principal components without iterating on N-vectors.

    With ``use_cor`` the rows are scaled by their standard deviation
    (before demeaning) and the pairs are those of the sample correlation
    matrix; otherwise of the sample covariance matrix. Requires M <= N.
    Null directions (rank-deficient data) are dropped with a warning.
    """
    r = _returns_array(returns)
    n, d = r.shape
    m = d - 1
    if m > n:
        raise DataError(f"too many observations: M={m} exceeds N={n}")
    if use_cor:
        r = r / r.std(axis=1, ddof=1, keepdims=True)
    y = (r - r.mean(axis=1, keepdims=True))[:, :m]
    yt = y @ phi_cholesky(m)
    g = yt.T @ yt
    rho, u = np.linalg.eigh(0.5 * (g + g.T))
    rho, u = rho[::-1], u[:, ::-1]

    keep = rho > RANK_TOL * max(1.0, rho[0])
    dropped = int(m - keep.sum())
    if dropped:
        warnings.warn(f"dropped {dropped} null eigenpair(s): data is rank-deficient",
                      RuntimeWarning, stacklevel=2)
    rho, u = rho[keep], u[:, keep]
    v = yt @ (u / np.sqrt(rho))
    return EigenSystem(rho, canonical_signs(v), m=m, dropped=dropped)


def eigen_power(returns, k: int, prec: float = 1e-3, seed=None,
                max_iter: int = 1_000_000, use_cor: bool = True) -> EigenSystem:
    """First ``k`` principal components by power iterations with deflation.

    Each product with the matrix is applied in factorized form (x^T then x).
    The first start vector is u/sqrt(N); later ones are seeded unit-norm
    Gaussian vectors. A pair has converged when every component of the new
    iterate is within ``prec`` of the previous one in ratio.
    """
    r = _returns_array(returns)
    n, d = r.shape
    m = d - 1
    if not 1 <= k <= m:
        raise DataError(f"k must lie in [1, M={m}], got {k}")
    if prec <= 0:
        raise DataError("prec must be positive")
    x = r - r.mean(axis=1, keepdims=True)
    if use_cor:
        x = x / np.sqrt(np.einsum("is,is->i", x, x))[:, None]
    else:
        x = x / np.sqrt(m)
    rng = np.random.default_rng(seed)

    values = np.empty(k)
    vectors = np.empty((n, k))
    counts = np.zeros(k, dtype=int)
    y = np.full(n, 1.0 / np.sqrt(n))
    for a in range(k):
        count = 0
        while True:
            count += 1
            y_prev = y
            y = x @ (x.T @ y)
            norm = np.sqrt(y @ y)
            if not norm > 0:
                raise NumericalError(f"pair {a + 1}: deflated matrix vanished (rank below k)")
            y = y / norm
            live = np.abs(y_prev) > _RATIO_GUARD
            if np.max(np.abs(y[live] / y_prev[live] - 1.0), initial=0.0) < prec:
                break
            if count >= max_iter:
                raise ConvergenceError(
                    f"pair {a + 1}: no convergence after {max_iter} iterations"
                )
        counts[a] = count
        z = x.T @ y
        values[a] = z @ z
        vectors[:, a] = y
        x = x - np.outer(y, z)
        y = rng.standard_normal(n)
        y /= np.sqrt(y @ y)
    return EigenSystem(values, canonical_signs(vectors), iter_counts=counts, m=m)
