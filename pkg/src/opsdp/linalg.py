"""Dense linear-algebra primitives with explicit tolerance contracts.

Everything here works on small dense matrices (d up to a few dozen), so a
full symmetric eigendecomposition is always affordable and is the single
building block behind inverse square roots, pseudo-inverses and the
eigen-subspace projectors.
"""

from __future__ import annotations

import numpy as np

EIG_FLOOR = 1e-12
NEG_EIG_CLAMP = 1e-10
SYM_TOL = 1e-12


class SingularMatrixError(ValueError):
    """Raised when an inverse square root is requested for a near-singular matrix."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def spd_eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix.

    Small negative eigenvalues (above -1e-10 relative to the spectrum scale)
    are clamped to zero. Anything more negative is a caller error.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(symmetrize(m))
    if vals.size and vals[0] < -NEG_EIG_CLAMP * scale:
        raise ValueError(f"matrix is not PSD (min eigenvalue {vals[0]:.3e})")
    return np.clip(vals, 0.0, None), vecs


def inv_sqrt(m: np.ndarray, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """Return M^{-1/2} = V diag(lambda^{-1/2}) V^T.

    Raises:
        SingularMatrixError: if the smallest eigenvalue is below ``eig_floor``.
    """
    vals, vecs = spd_eigh(m)
    if vals.size and vals[0] < eig_floor:
        raise SingularMatrixError(
            f"smallest eigenvalue {vals[0]:.3e} below floor {eig_floor:.1e}"
        )
    return symmetrize((vecs / np.sqrt(vals)) @ vecs.T)


def sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = spd_eigh(m)
    return symmetrize((vecs * np.sqrt(vals)) @ vecs.T)


def pinv(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a PSD matrix.

    Eigenvalues below ``tol * lambda_max`` are treated as exact zeros.
    """
    vals, vecs = spd_eigh(m)
    if not vals.size or vals[-1] <= 0.0:
        return np.zeros_like(np.asarray(m, dtype=float))
    keep = vals > tol * vals[-1]
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]
    return symmetrize((vecs * inv) @ vecs.T)


def eig_subspace_projection(a: np.ndarray, c: float) -> np.ndarray:
    """Orthogonal projector onto the span of eigenvectors of A with eigenvalue >= c."""
    vals, vecs = np.linalg.eigh(symmetrize(a))
    basis = vecs[:, vals >= c]
    return symmetrize(basis @ basis.T)


def top_abs_quadratic(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Maximize |z^T M z| over the unit ball.

    Only the symmetric part of M matters, so the maximizer is the eigenvector
    of (M + M^T)/2 whose eigenvalue has the largest magnitude. The sign of z
    is fixed so that its largest-magnitude entry is positive.
    """
    s = symmetrize(m)
    vals, vecs = np.linalg.eigh(s)
    k = int(np.argmax(np.abs(vals)))
    z = vecs[:, k].copy()
    pivot = int(np.argmax(np.abs(z)))
    if z[pivot] < 0:
        z = -z
    return z, float(abs(z @ s @ z))


def tensor_contract(t: np.ndarray, u: np.ndarray, z: np.ndarray, y: np.ndarray) -> float:
    """Return t[u, z, y] = sum_ijk t_ijk u_i z_j y_k."""
    t = np.asarray(t, dtype=float)
    u, z, y = (np.asarray(v, dtype=float) for v in (u, z, y))
    if t.ndim != 3 or t.shape != (u.size, z.size, y.size):
        raise ValueError(
            f"tensor shape {t.shape} does not match vectors ({u.size}, {z.size}, {y.size})"
        )
    return float(np.einsum("ijk,i,j,k->", t, u, z, y))


def outer3(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """(v outer M)_{ijk} = v_i M_jk."""
    return np.multiply.outer(np.asarray(v, dtype=float), np.asarray(m, dtype=float))


def mahalanobis(x: np.ndarray, a: np.ndarray) -> float:
    """sqrt(x^T A x), with tiny negative rounding clipped to zero."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(max(float(x @ np.asarray(a, dtype=float) @ x), 0.0)))


def row_mahalanobis(xs: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Row-wise sqrt(x^T A x) for an (..., d) array."""
    q = np.einsum("...i,ij,...j->...", xs, a, xs)
    return np.sqrt(np.clip(q, 0.0, None))
