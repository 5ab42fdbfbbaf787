"""Closed-form and iterative linear algebra for symmetric 3x3 matrices.

Vectors are float arrays of shape ``(3,)`` and matrices of shape ``(3, 3)``.
``cholesky3`` and ``invert3`` also accept stacks of shape ``(..., 3, 3)``.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NotPositiveDefinite

PD_TOL = 1e-12

# Upper-triangle index pairs in Jacobi sweep order.
_PAIRS = ((0, 1), (0, 2), (1, 2))


def sym3(xx: float, yy: float, zz: float, xy: float = 0.0, xz: float = 0.0, yz: float = 0.0) -> np.ndarray:
    """Build a symmetric matrix from its six independent entries."""
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]], dtype=float)


def outer3(u: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
    v = u if v is None else v
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return u[..., :, None] * v[..., None, :]


def unit3(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cholesky3(m: np.ndarray, tol: float = PD_TOL) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises NotPositiveDefinite when any pivot is ``<= tol``.
    """
    m = np.asarray(m, dtype=float)
    p0 = m[..., 0, 0]
    _check_pivot(p0, tol)
    l00 = np.sqrt(p0)
    l10 = m[..., 1, 0] / l00
    l20 = m[..., 2, 0] / l00
    p1 = m[..., 1, 1] - l10 * l10
    _check_pivot(p1, tol)
    l11 = np.sqrt(p1)
    l21 = (m[..., 2, 1] - l20 * l10) / l11
    p2 = m[..., 2, 2] - l20 * l20 - l21 * l21
    _check_pivot(p2, tol)
    l22 = np.sqrt(p2)
    out = np.zeros(m.shape)
    out[..., 0, 0] = l00
    out[..., 1, 0] = l10
    out[..., 1, 1] = l11
    out[..., 2, 0] = l20
    out[..., 2, 1] = l21
    out[..., 2, 2] = l22
    return out


def _check_pivot(p, tol):
    if not np.all(p > tol):
        raise NotPositiveDefinite(f"Cholesky pivot {np.min(p):.3e} <= {tol:g}")


def invert3(m: np.ndarray, tol: float = PD_TOL) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via its Cholesky factor."""
    lo = cholesky3(m, tol)
    eye = np.broadcast_to(np.eye(3), lo.shape)
    linv = solve_lower3(lo, eye)
    return np.swapaxes(linv, -1, -2) @ linv


def solve_lower3(lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution ``L x = b``; ``b`` may be a vector or a matrix of columns."""
    lo = np.asarray(lo, dtype=float)
    b = np.asarray(b, dtype=float)
    vec = b.ndim == lo.ndim - 1
    if vec:
        b = b[..., None]
    x = np.empty(np.broadcast_shapes(lo.shape[:-2], b.shape[:-2]) + b.shape[-2:])
    x[..., 0, :] = b[..., 0, :] / lo[..., 0, 0, None]
    x[..., 1, :] = (b[..., 1, :] - lo[..., 1, 0, None] * x[..., 0, :]) / lo[..., 1, 1, None]
    x[..., 2, :] = (
        b[..., 2, :] - lo[..., 2, 0, None] * x[..., 0, :] - lo[..., 2, 1, None] * x[..., 1, :]
    ) / lo[..., 2, 2, None]
    return x[..., 0] if vec else x


def solve_upper_t3(lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution ``L.T x = b`` for a vector ``b``."""
    lo = np.asarray(lo, dtype=float)
    b = np.asarray(b, dtype=float)
    x2 = b[..., 2] / lo[..., 2, 2]
    x1 = (b[..., 1] - lo[..., 2, 1] * x2) / lo[..., 1, 1]
    x0 = (b[..., 0] - lo[..., 1, 0] * x1 - lo[..., 2, 0] * x2) / lo[..., 0, 0]
    return np.stack([x0, x1, x2], axis=-1)


def eigh3(m: np.ndarray, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of one symmetric 3x3 matrix.

    Returns ``(w, v)`` with eigenvalues ``w`` ascending and eigenvectors in
    the columns of ``v`` (``m @ v[:, k] == w[k] * v[:, k]``).
    """
    a = np.array(m, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(3)
    scale = max(float(np.abs(a).max()), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = math.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-17 * scale:
            break
        for p, q in _PAIRS:
            apq = a[p, q]
            if apq == 0.0:
                continue
            diff = a[q, q] - a[p, p]
            if diff == 0.0:
                t = 1.0
            elif abs(apq) < 1e-150 * abs(diff):
                t = apq / diff  # theta^2 would overflow
            else:
                theta = diff / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = a[q, p] = 0.0
            v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]
