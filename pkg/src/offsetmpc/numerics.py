"""Dense linear algebra kernels used across the toolkit.

Thin wrappers over LAPACK (via numpy/scipy) with explicit singularity
detection and fixed tolerance semantics, so every caller shares one
notion of "singular", "rank", and "spectral radius".

Matrices are 2-D float ndarrays, vectors are 1-D.
"""

import warnings

import numpy as np
import scipy.linalg


class SingularMatrix(Exception):
    """Raised when an LU pivot falls below the relative threshold."""


class NoConvergence(Exception):
    """Raised when the eigenvalue iteration fails to converge."""


PIVOT_RTOL = 1e-12
RANK_RTOL = 1e-9


def solve_linear(A, b):
    """Solve A x = b by LU with partial pivoting.

    Raises SingularMatrix when any pivot magnitude drops below
    PIVOT_RTOL * max|A|.  b may be a vector or a matrix of stacked
    right-hand sides.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    scale = np.abs(A).max() if A.size else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix")
    with warnings.catch_warnings():
        # the pivot check below owns singularity reporting
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < PIVOT_RTOL * scale:
        raise SingularMatrix(
            f"pivot {pivots.min():.3e} below {PIVOT_RTOL:.0e} * max|A| = {PIVOT_RTOL * scale:.3e}")
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=True)


def pseudoinverse(A):
    """Moore-Penrose pseudoinverse via SVD (rank-revealing)."""
    A = np.asarray(A, dtype=float)
    return np.linalg.pinv(A)


def matrix_rank(A, tol=RANK_RTOL):
    """Number of singular values above tol * sigma_max.

    tol is relative; sigma_max = 0 gives rank 0.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0
    s = scipy.linalg.svdvals(A)
    smax = s[0] if len(s) else 0.0
    if smax == 0.0:
        return 0
    return int(np.sum(s > tol * smax))


def spectral_radius(A):
    """max |lambda_i(A)| via the QR eigenvalue algorithm."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    try:
        ev = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return float(np.abs(ev).max()) if ev.size else 0.0
