"""
Dense linear-algebra kernels for SVD-Cache.

Feature matrices are plain two-dimensional ``numpy`` float64 arrays of shape
(N tokens, D channels). Every function here is pure: inputs are never
modified in place.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.error_handler import LinalgError, ValidationError, setup_logger

logger = setup_logger('svdcache.linalg')

# Singular values below ZERO_TRIM_RATIO * sigma_1 count as zero for effective rank.
ZERO_TRIM_RATIO = 1e-12
ORTHONORMAL_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 60
SVD_METHODS = ('lapack', 'jacobi')


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD factors ``F = U diag(sigma) V^T``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def r(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    def effective_rank(self) -> int:
        """Rank after zero-trimming."""
        return effective_rank(self.sigma)

    def trimmed(self) -> 'SvdFactors':
        """Factors restricted to the effective rank."""
        k = self.effective_rank()
        return SvdFactors(self.U[:, :k].copy(), self.sigma[:k].copy(), self.V[:, :k].copy())


def as_feature_matrix(F, name: str = "F") -> np.ndarray:
    """
    Validate and convert an array-like into a finite float64 feature matrix.

    Args:
        F: Array-like with two dimensions
        name: Name used in diagnostics

    Returns:
        Float64 array of shape (N, D)

    Raises:
        ValidationError: If the input is not 2-D, is empty or contains NaN/Inf
    """
    arr = np.asarray(F, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got ndim={arr.ndim}",
                              {'name': name, 'shape': arr.shape})
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must have at least one row and one column",
                              {'name': name, 'shape': arr.shape})
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise ValidationError(f"{name} contains {bad} non-finite entries",
                              {'name': name, 'shape': arr.shape, 'non_finite': bad})
    return arr


def effective_rank(sigma: np.ndarray) -> int:
    """Number of singular values above ``ZERO_TRIM_RATIO * sigma[0]``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > ZERO_TRIM_RATIO * sigma[0]))


def fix_signs(U: np.ndarray, V: np.ndarray):
    """
    Flip singular vector pairs so each column of V has a positive largest-magnitude entry.

    Ties on magnitude resolve to the lowest row index.

    Returns:
        (U, V) with signs fixed (new arrays)
    """
    if V.shape[1] == 0:
        return U.copy(), V.copy()
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def _complete_columns(U: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid columns of U with unit vectors orthogonal to the valid ones."""
    missing = int(np.count_nonzero(~valid))
    if missing == 0:
        return U
    n = U.shape[0]
    kept = U[:, valid]
    Q, _ = np.linalg.qr(np.hstack([kept, np.eye(n)]))
    out = U.copy()
    out[:, ~valid] = Q[:, kept.shape[1]:kept.shape[1] + missing]
    return out


def _jacobi_tall(A: np.ndarray, max_sweeps: int, tol: float):
    """One-sided Hestenes-Jacobi SVD of a tall (N >= D) matrix."""
    M = A.copy()
    n = M.shape[1]
    V = np.eye(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                mp = M[:, p]
                mq = M[:, q]
                alpha = float(mp @ mp)
                beta = float(mq @ mq)
                gamma = float(mp @ mq)
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * mp - s * mq
                new_q = s * mp + c * mq
                M[:, p] = new_p
                M[:, q] = new_q
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]
        if not rotated:
            logger.debug(f"Jacobi SVD converged after {sweep + 1} sweeps for shape {A.shape}")
            break
    else:
        raise LinalgError(
            f"SVD did not converge within {max_sweeps} sweeps for matrix of shape {A.shape[0]}x{A.shape[1]}",
            {'shape': A.shape, 'max_sweeps': max_sweeps}
        )

    sigma = np.linalg.norm(M, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma = sigma[order]
    M = M[:, order]
    V = V[:, order]
    valid = sigma > (ZERO_TRIM_RATIO * sigma[0] if sigma[0] > 0 else 0.0)
    U = np.zeros_like(M)
    U[:, valid] = M[:, valid] / sigma[valid]
    U = _complete_columns(U, valid)
    return U, sigma, V


def jacobi_svd(F, max_sweeps: int = DEFAULT_MAX_SWEEPS, tol: Optional[float] = None):
    """
    Thin SVD by one-sided Jacobi rotations.

    Args:
        F: Feature matrix
        max_sweeps: Iteration cap on full sweeps over all column pairs
        tol: Relative orthogonality tolerance for column pairs (default max(N, D) * eps)

    Returns:
        (U, sigma, V) with sigma descending; signs not yet normalized

    Raises:
        LinalgError: If the sweeps do not converge, naming the matrix shape
    """
    A = as_feature_matrix(F)
    if tol is None:
        tol = max(A.shape) * float(np.finfo(np.float64).eps)
    if A.shape[0] >= A.shape[1]:
        return _jacobi_tall(A, max_sweeps, tol)
    U_t, sigma, V_t = _jacobi_tall(A.T, max_sweeps, tol)
    return V_t, sigma, U_t


def thin_svd(F, method: str = 'lapack', max_sweeps: int = DEFAULT_MAX_SWEEPS) -> SvdFactors:
    """
    Compute the thin SVD ``F = U diag(sigma) V^T`` with r = min(N, D).

    The LAPACK driver (Golub-Kahan bidiagonalization) is the default. If it
    fails to converge the one-sided Jacobi solver takes over, bounded by
    ``max_sweeps``. Right singular vectors follow the sign convention of
    :func:`fix_signs`.

    Args:
        F: Feature matrix (N x D), finite
        method: ``'lapack'`` or ``'jacobi'``
        max_sweeps: Iteration cap for the Jacobi solver

    Returns:
        SvdFactors with sigma sorted descending

    Raises:
        ValidationError: For non-finite input or an unknown method
        LinalgError: If no solver converges
    """
    A = as_feature_matrix(F)
    if method not in SVD_METHODS:
        raise ValidationError(f"Unknown SVD method: {method}", {'method': method, 'allowed': SVD_METHODS})

    if method == 'lapack':
        try:
            U, sigma, Vt = np.linalg.svd(A, full_matrices=False)
            V = Vt.T
        except np.linalg.LinAlgError as e:
            logger.warning(f"LAPACK SVD failed for shape {A.shape} ({e}); falling back to Jacobi")
            U, sigma, V = jacobi_svd(A, max_sweeps=max_sweeps)
    else:
        U, sigma, V = jacobi_svd(A, max_sweeps=max_sweeps)

    U, V = fix_signs(U, V)
    return SvdFactors(np.ascontiguousarray(U), np.ascontiguousarray(sigma), np.ascontiguousarray(V))


def select_rank(sigma, tau: float) -> int:
    """
    Smallest k >= 1 whose cumulative squared singular values reach a fraction tau of the total.

    Args:
        sigma: Nonincreasing, nonnegative singular values
        tau: Energy threshold in (0, 1]

    Returns:
        Rank k

    Raises:
        ValidationError: If tau is outside (0, 1] or sigma is malformed
        LinalgError: If sigma is all zero (rank undefined)
    """
    if not (isinstance(tau, (int, float)) and 0.0 < float(tau) <= 1.0):
        raise ValidationError(f"Energy threshold tau must be in (0, 1], got {tau}", {'tau': tau})
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValidationError("Singular value vector is empty")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValidationError("Singular values must be finite and nonnegative")
    if np.any(np.diff(s) > 0):
        raise ValidationError("Singular values must be nonincreasing")

    energy = np.cumsum(s * s)
    total = energy[-1]
    if total <= 0.0:
        raise LinalgError("Rank is undefined for an all-zero singular value vector")
    ratio = energy / total
    # Rounding slack only for tau = 1.0, so full rank stays reachable.
    threshold = float(tau) if float(tau) < 1.0 else 1.0 - 1e-12
    hits = np.nonzero(ratio >= threshold)[0]
    return int(hits[0]) + 1


def truncate(f: SvdFactors, k: int) -> np.ndarray:
    """
    Rank-k reconstruction ``U_k diag(sigma_k) V_k^T``.

    Raises:
        ValidationError: If k is outside [1, r]
    """
    if not isinstance(k, (int, np.integer)) or k < 1 or k > f.r:
        raise ValidationError(f"Truncation rank must be in [1, {f.r}], got {k}", {'k': k, 'r': f.r})
    return (f.U[:, :k] * f.sigma[:k]) @ f.V[:, :k].T


def check_orthonormal(V, tol: float = ORTHONORMAL_TOL, name: str = "V") -> np.ndarray:
    """
    Validate that the columns of V are orthonormal within ``tol`` (Frobenius).

    Returns:
        V as a float64 array

    Raises:
        ValidationError: If V is not 2-D or its Gram matrix deviates from I
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix", {'shape': V.shape})
    if V.shape[1] > V.shape[0]:
        raise ValidationError(f"{name} has more columns than rows; columns cannot be orthonormal",
                              {'shape': V.shape})
    deviation = float(np.linalg.norm(V.T @ V - np.eye(V.shape[1])))
    if deviation > tol:
        raise ValidationError(f"{name} columns are not orthonormal (deviation {deviation:.3e})",
                              {'deviation': deviation, 'tol': tol})
    return V


def project_onto_basis(F, V_k) -> np.ndarray:
    """
    Orthogonal projection of the rows of F onto span(V_k): ``F V_k V_k^T``.

    Raises:
        ValidationError: On dimension mismatch or non-orthonormal V_k
    """
    A = as_feature_matrix(F)
    V = check_orthonormal(V_k, name="V_k")
    if V.shape[0] != A.shape[1]:
        raise ValidationError(
            f"Basis dimension {V.shape[0]} does not match feature channels {A.shape[1]}",
            {'basis_rows': V.shape[0], 'feature_cols': A.shape[1]}
        )
    return (A @ V) @ V.T


def complement_projection(F, V_k) -> np.ndarray:
    """Component of F orthogonal to span(V_k): ``F (I - V_k V_k^T)``."""
    A = as_feature_matrix(F)
    return A - project_onto_basis(A, V_k)


def _check_same_shape(A: np.ndarray, B: np.ndarray) -> None:
    if A.shape != B.shape:
        raise ValidationError(f"Shape mismatch: {A.shape} vs {B.shape}",
                              {'shape_a': A.shape, 'shape_b': B.shape})


def frobenius_norm(F) -> float:
    return float(np.linalg.norm(np.asarray(F, dtype=np.float64)))


def frobenius_inner(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_same_shape(A, B)
    return float(np.vdot(A, B))


def relative_error(A, B, reference_norm: Optional[float] = None) -> float:
    """
    ``||A - B||_F / ||B||_F``.

    Raises:
        ValidationError: On shape mismatch
        LinalgError: If the reference B has zero norm
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_same_shape(A, B)
    denom = frobenius_norm(B) if reference_norm is None else float(reference_norm)
    if denom == 0.0:
        raise LinalgError("Relative error is undefined for a zero-norm reference")
    return float(np.linalg.norm(A - B)) / denom
