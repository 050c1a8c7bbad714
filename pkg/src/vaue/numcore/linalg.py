"""Cholesky factorisation and Gaussian sampling."""

import numpy as np


class CholeskyError(np.linalg.LinAlgError):
    """Matrix is not symmetric positive definite.

    ``pivot`` is the zero-based row at which the factorisation broke down,
    ``value`` the non-positive diagonal residual found there.
    """

    def __init__(self, message, pivot=None, value=None):
        super().__init__(message)
        self.pivot = pivot
        self.value = value


def cholesky(m, symmetry_tol=1e-10):
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises :class:`CholeskyError` for non-square, asymmetric or
    non-positive-definite input.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise CholeskyError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=symmetry_tol * scale):
        raise CholeskyError("matrix is not symmetric")
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        d = a[j, j] - row @ row
        if not d > 0.0:
            raise CholeskyError(
                f"matrix is not positive definite: pivot {j} has residual {d:.6g}", pivot=j, value=d
            )
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ row) / low[j, j]
    return low


def sample_mvn(mean, chol, rng):
    """Draw ``mean + chol @ g`` with ``g`` standard normal.

    Consumes exactly ``len(mean)`` normal draws from ``rng``.
    """
    mu = np.asarray(mean, dtype=np.float64)
    low = np.asarray(chol, dtype=np.float64)
    if mu.ndim != 1 or low.shape != (mu.size, mu.size):
        raise ValueError(f"dimension mismatch: mean {mu.shape}, chol {low.shape}")
    return mu + low @ rng.normal(mu.size)
