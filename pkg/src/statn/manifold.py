"""Projection/retraction SGD on the Stiefel and centred-matrix manifolds.

The mean shape lives on ``{X : X 1 = 0}`` (rows sum to zero) and the shape
and texture bases on ``{X : X^T X = I}``. A constrained update projects the
Euclidean step onto the tangent space at the current point and retracts the
result back onto the manifold.
"""

from __future__ import annotations

import numpy as np

from .errors import ConstraintError, NumericalError
from .tensor_core import Param

STIEFEL_TOL = 1e-4
CENTRED_TOL = 1e-6


def stiefel_error(x: np.ndarray) -> float:
    """``||X^T X - I||_F``."""
    return float(np.linalg.norm(x.T @ x - np.eye(x.shape[1])))


def centred_error(x: np.ndarray) -> float:
    """``||X 1||_inf``."""
    return float(np.abs(x.sum(axis=1)).max())


def proj_centred(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Tangent projection: subtract each row's mean from that row."""
    return u - u.mean(axis=1, keepdims=True)


def retr_centred(x: np.ndarray, v: np.ndarray, tol: float = CENTRED_TOL) -> np.ndarray:
    if centred_error(x) > tol or centred_error(v) > tol:
        raise ConstraintError("retr_centred needs a centred point and a row-centred step")
    return x + v


def sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def proj_stiefel(x: np.ndarray, u: np.ndarray, tol: float = STIEFEL_TOL) -> np.ndarray:
    """Tangent projection ``U - X sym(X^T U)``."""
    err = stiefel_error(x)
    if err > tol:
        raise ConstraintError(f"proj_stiefel: point is off the manifold (||X^T X - I|| = {err:.3g})")
    return u - x @ sym(x.T @ u)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with ``a = E diag(lam) E^T``.
    Iterates until the off-diagonal Frobenius norm is below ``tol`` times the
    matrix norm.
    """
    a = np.array(a, dtype=np.float64)
    k = a.shape[0]
    e = np.eye(k)
    scale = max(np.linalg.norm(a), 1e-300)
    offdiag = ~np.eye(k, dtype=bool)
    for _ in range(max_sweeps):
        # summed directly: sum(a^2) - sum(diag^2) cancels to zero too early
        off = np.sqrt(np.sum(a[offdiag] ** 2))
        if off <= tol * scale:
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with J the (p, q) plane rotation
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                ep, eq = e[:, p].copy(), e[:, q].copy()
                e[:, p] = c * ep - s * eq
                e[:, q] = s * ep + c * eq
    return np.diag(a).copy(), e


def polar_factor(a: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Orthogonal polar factor ``A (A^T A)^{-1/2}`` of a tall full-rank matrix."""
    lam, e = jacobi_eigh(a.T @ a)
    if lam.min() <= rcond * max(lam.max(), 1e-300):
        raise NumericalError(
            f"polar factor of a rank-deficient matrix: eigenvalues of A^T A span "
            f"[{lam.min():.3g}, {lam.max():.3g}]"
        )
    return a @ (e * lam ** -0.5) @ e.T


def retr_stiefel(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns to ``X + V`` (Frobenius norm)."""
    if x.shape[1] == 0 or not np.any(v):
        return x.copy()
    return polar_factor(x + v)


def manifold_error(param: Param) -> float:
    if param.constraint == "stiefel":
        return stiefel_error(param.value)
    if param.constraint == "centred":
        return centred_error(param.value)
    return 0.0


def constrained_sgd_step(param: Param, lr: float | None = None) -> Param:
    """Gradient step that keeps ``param`` on its manifold; mutates and returns it."""
    lr = param.learning_rate if lr is None else lr
    step = -lr * param.grad
    if param.constraint == "none":
        param.value = param.value + step
    elif param.constraint == "centred":
        err = centred_error(param.value)
        if err > CENTRED_TOL:
            raise ConstraintError(f"centred parameter drifted off the manifold ({err:.3g})")
        param.value = retr_centred(param.value, proj_centred(param.value, step))
    elif param.constraint == "stiefel":
        err = stiefel_error(param.value)
        if err > STIEFEL_TOL:
            raise ConstraintError(f"stiefel parameter drifted off the manifold ({err:.3g})")
        param.value = retr_stiefel(param.value, proj_stiefel(param.value, step))
    return param


def restore(param: Param, tol: float = 1e-8) -> bool:
    """Re-retract ``param`` if floating-point drift exceeds ``tol``; returns whether it did."""
    if manifold_error(param) <= tol:
        return False
    if param.constraint == "stiefel":
        param.value = polar_factor(param.value)
    elif param.constraint == "centred":
        param.value = param.value - param.value.mean(axis=1, keepdims=True)
    return True
