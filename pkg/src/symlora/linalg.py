"""Jacobi-rotation eigensolvers and singular values.

Singular values are obtained by diagonalizing the Gram matrix of the
input with Jacobi rotations, in the one-sided (Hestenes) form: each
rotation is chosen from an entry of the implicit Gram matrix (a pair of
column dot products) and applied to the columns directly. Working on the
columns instead of the explicitly formed Gram matrix preserves full
relative accuracy for tiny singular values, which the rank-bound checks
need; explicitly squaring the matrix would floor them near sqrt(eps).
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError
from .matrix import Matrix

_MAX_SWEEPS = 60


def jacobi_eigh(sym: np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (w, V) with eigenvalues w descending and orthonormal columns
    V such that sym ~= V @ diag(w) @ V.T. Input is symmetrized before
    iterating, so near-symmetric inputs are accepted.
    """
    a = np.asarray(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh requires a square matrix, got shape {a.shape}")
    n = a.shape[0]
    A = (a + a.T) / 2.0
    V = np.eye(n)
    if n == 1:
        return A[0].copy(), V

    total = np.linalg.norm(A)
    if total == 0.0:
        return np.zeros(n), V

    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= 1e-14 * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-18 * total / n:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                if t == 0.0:  # theta overflowed; rotation is numerically identity
                    continue
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(f"jacobi_eigh: no convergence in {max_sweeps} sweeps")

    w = np.diag(A).copy()
    order = np.argsort(-w)
    return w[order], V[:, order]


def _hestenes_singular_values(b: np.ndarray, max_sweeps: int) -> np.ndarray:
    """One-sided Jacobi on the columns of b (rows >= cols)."""
    U = np.array(b, dtype=np.float64)
    n = U.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up = U[:, p]
                uq = U[:, q]
                gamma = float(up @ uq)
                if gamma == 0.0:
                    continue
                alpha = float(up @ up)
                beta = float(uq @ uq)
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                new_q = s * up + c * uq
                U[:, p] = new_p
                U[:, q] = new_q
        if not rotated:
            return np.linalg.norm(U, axis=0)
    raise ConvergenceError(f"singular_values: no convergence in {max_sweeps} sweeps")


def singular_values(a: Matrix | np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> np.ndarray:
    """All singular values of a, descending, length min(rows, cols).

    Raises ConvergenceError if the rotation sweeps exhaust their budget.
    """
    arr = a.to_numpy() if isinstance(a, Matrix) else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"singular_values requires a 2-D input, got shape {arr.shape}")
    if arr.shape[0] < arr.shape[1]:
        arr = arr.T
    if arr.shape[1] == 1:
        return np.asarray([np.linalg.norm(arr)])
    sigma = _hestenes_singular_values(arr, max_sweeps)
    return np.sort(sigma)[::-1].copy()


def rank_ratio(a: Matrix | np.ndarray, r: int) -> float:
    """sigma_{r+1} / sigma_1 of a, the numerical evidence that rank(a) <= r.

    Returns 0.0 when sigma_1 == 0 or when a has no (r+1)-th singular value.
    """
    sigma = singular_values(a)
    if r >= sigma.shape[0] or sigma[0] == 0.0:
        return 0.0
    return float(sigma[r] / sigma[0])
