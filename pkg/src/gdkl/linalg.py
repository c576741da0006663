"""Stabilized Cholesky factorization and triangular solves."""
from dataclasses import dataclass
import logging

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from gdkl.errors import DimensionMismatch, NotPositiveDefinite

log = logging.getLogger(__name__)

JITTER_RETRIES = 7  # base * 10**k for k = 0..6


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    def solve(self, B):
        """Return (K + jitter I)^{-1} B via forward/back substitution."""
        return scipy.linalg.cho_solve((self.lower, True), B, check_finite=False)

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.lower)))

    def inverse(self):
        """Explicit inverse from the factor (LAPACK potri), symmetrized."""
        inv, info = lapack.dpotri(self.lower, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"potri failed with info={info}")
        return np.tril(inv) + np.tril(inv, -1).T


def _check_square_symmetric(K, tol=1e-10):
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {K.shape}")
    scale = max(1.0, float(np.max(np.abs(K)))) if K.size else 1.0
    if K.size and np.max(np.abs(K - K.T)) > tol * scale:
        raise DimensionMismatch("matrix is not symmetric")


def cholesky_with_jitter(K, base_jitter=1e-8, check_symmetric=True):
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    The plain factorization is tried first; after that the ladder
    ``base_jitter * 10**k`` for ``k = 0..6`` is walked until one succeeds.
    """
    K = np.asarray(K, dtype=float)
    if check_symmetric:
        _check_square_symmetric(K)
    n = K.shape[0]
    if n == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    try:
        return CholeskyFactor(np.linalg.cholesky(K), 0.0)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(n)
    for k in range(JITTER_RETRIES):
        jitter = base_jitter * 10.0**k
        try:
            L = np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        log.debug("cholesky succeeded with jitter %.1e", jitter)
        return CholeskyFactor(L, jitter)
    raise NotPositiveDefinite(
        f"cholesky failed for {n}x{n} matrix up to jitter {base_jitter * 10.0 ** (JITTER_RETRIES - 1):.1e}"
    )
