"""Small dense symmetric eigenproblems via cyclic Jacobi rotations."""

from __future__ import annotations

import numpy as np

JACOBI_TOL = 1e-10


def jacobi_eigh(S: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix.

    Cyclic Jacobi: sweep every off-diagonal pair in row order, zeroing it with
    a plane rotation, until the off-diagonal Frobenius norm falls below
    ``tol`` times the matrix norm (or absolute ``tol`` for tiny matrices).

    Returns:
        (w, V) with eigenvalues ``w`` ascending and orthonormal eigenvectors
        in the columns of ``V``.
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"square matrix expected, got shape {A.shape}")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                A[p, q] = A[q, p] = 0.0
                V = V @ J
    w = np.diag(A).copy()
    order = np.argsort(w)
    return w[order], V[:, order]


def min_eig(S: np.ndarray) -> tuple[float, np.ndarray]:
    """Smallest eigenvalue of a symmetric matrix and a unit eigenvector."""
    w, V = jacobi_eigh(S)
    v = V[:, 0]
    return float(w[0]), v / np.linalg.norm(v)


def max_eig(S: np.ndarray) -> float:
    return float(jacobi_eigh(S)[0][-1])


def sym_part(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)
