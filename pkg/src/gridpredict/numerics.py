"""Dense linear-algebra kernels: ridge least squares, pseudo-inverse,
symmetric eigendecomposition and iterated operator application."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, NotSymmetric, SingularSystem, ValidationError

PINV_RTOL = 1e-12
SYM_TOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite, non-empty 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class RidgeSolution:
    coefficients: np.ndarray
    objective_value: float
    residual_gradient_norm: float


def ridge_objective(K: np.ndarray, Yf: np.ndarray, Yp: np.ndarray, lam: float) -> float:
    """``||Yf - K Yp||_F^2 + lam ||K||_F^2``."""
    r = Yf - K @ Yp
    return float(np.sum(r * r) + lam * np.sum(K * K))


def ridge_gradient(K: np.ndarray, Yf: np.ndarray, Yp: np.ndarray, lam: float) -> np.ndarray:
    return 2.0 * (K @ Yp - Yf) @ Yp.T + 2.0 * lam * K


def ridge_lstsq(Yf, Yp, lam: float = 0.0) -> RidgeSolution:
    """Minimise ``||Yf - K Yp||_F^2 + lam ||K||_F^2`` over K.

    The minimiser is ``K = Yf Yp^T (Yp Yp^T + lam I)^{-1}``. For ``lam > 0`` the
    Gram matrix is SPD and is factored by Cholesky; otherwise (or if the
    factorisation breaks down) the thin SVD of ``Yp`` is used.

    Raises
    ------
    DimensionMismatch
        If ``Yf`` and ``Yp`` have different column counts.
    SingularSystem
        If ``lam == 0`` and ``Yp`` is numerically rank deficient.
    """
    Yf = as_matrix(Yf, "Yf")
    Yp = as_matrix(Yp, "Yp")
    if Yf.shape[1] != Yp.shape[1]:
        raise DimensionMismatch(f"Yf has {Yf.shape[1]} columns but Yp has {Yp.shape[1]}")
    if not lam >= 0.0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    q = Yp.shape[0]
    K = None
    if lam > 0.0:
        gram = Yp @ Yp.T + lam * np.eye(q)
        try:
            factor = linalg.cho_factor(gram, lower=True, check_finite=False)
            K = linalg.cho_solve(factor, Yp @ Yf.T, check_finite=False).T
        except linalg.LinAlgError:
            K = None
    if K is None:
        U, s, Vt = np.linalg.svd(Yp, full_matrices=False)
        if lam == 0.0:
            # Yp Yp^T must be invertible: rank q and not numerically singular
            if s.size < q or s[-1] == 0.0 or (s[-1] / s[0]) ** 2 < max(Yp.shape) * np.finfo(float).eps:
                raise SingularSystem("Yp Yp^T is singular; use lambda > 0")
        K = (Yf @ Vt.T) * (s / (s * s + lam)) @ U.T
    return RidgeSolution(
        coefficients=K,
        objective_value=ridge_objective(K, Yf, Yp, lam),
        residual_gradient_norm=float(np.linalg.norm(ridge_gradient(K, Yf, Yp, lam))),
    )


def pseudo_inverse(M, tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below ``tol * s_max`` are treated as zero.
    """
    M = as_matrix(M, "M")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = s > tol * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def eig_sym(M, tol: float = SYM_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
    symmetric matrix."""
    M = as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {M.shape}")
    if np.max(np.abs(M - M.T)) > tol * max(1.0, np.max(np.abs(M))):
        raise NotSymmetric("matrix is not symmetric")
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    return w, U


def iterate_operator(K, v, h: int) -> np.ndarray:
    """Return the rows ``K v, K^2 v, ..., K^h v`` as an ``(h, q)`` array.

    Powers of K are never formed; each row is one more matrix-vector product.
    ``v`` may also be ``(q, B)`` to propagate B vectors at once, in which case
    the result has shape ``(h, q, B)``.
    """
    K = np.asarray(K, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"operator must be square, got {K.shape}")
    if v.shape[0] != K.shape[0]:
        raise DimensionMismatch(f"vector length {v.shape[0]} does not match operator size {K.shape[0]}")
    if h < 0:
        raise ValidationError("h must be non-negative")
    out = np.empty((h,) + v.shape)
    cur = v
    for i in range(h):
        cur = K @ cur
        out[i] = cur
    return out
