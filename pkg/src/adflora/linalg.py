"""Dense real-matrix kernel.

Matrices are plain 2-D ``float64`` numpy arrays. Products and norms defer to
numpy; the eigen/singular solvers are cyclic Jacobi iterations so the
spectral quantities used by the mixing and smoothness code have a known,
dependency-free error profile.
"""

import numpy as np

from .errors import ConvergenceError, ShapeError

MAX_SWEEPS = 100
OFF_DIAG_TOL = 1e-12


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def mat_mul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def symmetric_eigenvalues(s, max_sweeps=MAX_SWEEPS, tol=OFF_DIAG_TOL):
    """Eigenvalues of a symmetric matrix, descending, by cyclic Jacobi.

    Iterates until the off-diagonal Frobenius mass falls below
    ``tol * ||s||_F``.
    """
    s = as_matrix(s, "s")
    n = s.shape[0]
    if s.shape[1] != n:
        raise ShapeError(f"expected square matrix, got {s.shape}")
    a = 0.5 * (s + s.T)
    scale = max(frobenius_norm(a), np.finfo(float).tiny)

    mask = ~np.eye(n, dtype=bool)

    def off(m):
        # summed directly; total minus diagonal mass cancels catastrophically
        return frobenius_norm(m[mask])

    for _ in range(max_sweeps):
        if off(a) <= tol * scale:
            return np.sort(np.diag(a))[::-1].copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                diff = a[q, q] - a[p, p]
                if apq == 0.0 or abs(apq) <= np.finfo(float).eps * 1e-3 * abs(diff):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # a <- J^T a J with J the (p, q) rotation
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - sn * row_q
                a[q, :] = sn * row_p + c * row_q
    residual = off(a) / scale
    if residual <= tol:
        return np.sort(np.diag(a))[::-1].copy()
    raise ConvergenceError("symmetric Jacobi did not converge", residual)


def singular_values(a, max_sweeps=MAX_SWEEPS, tol=OFF_DIAG_TOL):
    """All singular values of ``a`` in descending order.

    One-sided (Hestenes) Jacobi: columns are rotated pairwise until every
    pair is orthogonal to within ``tol``. Each rotation is the Jacobi
    rotation that diagonalizes the matching 2x2 block of the Gram matrix,
    but the Gram matrix is never formed, so small singular values keep
    full absolute accuracy.
    """
    a = as_matrix(a, "a")
    u = a.T.copy() if a.shape[0] < a.shape[1] else a.copy()
    k = u.shape[1]
    # columns below this norm are numerically zero relative to ||a||
    floor = (np.finfo(float).eps * frobenius_norm(a)) ** 2
    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if gamma == 0.0 or alpha <= floor or beta <= floor:
                    continue
                corr = abs(gamma) / (np.sqrt(alpha) * np.sqrt(beta))
                residual = max(residual, corr)
                if corr <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(zeta, 1.0))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = u[:, p].copy()
                u[:, p] = c * col_p - s * u[:, q]
                u[:, q] = s * col_p + c * u[:, q]
        if not rotated:
            sv = np.sqrt(np.sum(u * u, axis=0))
            return np.sort(sv)[::-1].copy()
    raise ConvergenceError("one-sided Jacobi SVD did not converge", residual)


def spectral_norm(a):
    """Largest singular value."""
    return float(singular_values(a)[0])
