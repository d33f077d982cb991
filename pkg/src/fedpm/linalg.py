"""Dense symmetric linear algebra used by every method.

All matrices are float64 numpy arrays. Solves go through a Cholesky
factorization; no explicit inverse is ever formed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .errors import EmptyList, NotPositiveDefinite, ShapeMismatch

PIVOT_TOL = 1e-14


def symmetrize(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + A.T)


def is_symmetric(A: np.ndarray) -> bool:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    tol = 1e-12 * np.maximum(1.0, np.abs(A))
    return bool(np.all(np.abs(A - A.T) <= tol))


def cholesky_factor(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``A``.

    Raises NotPositiveDefinite when any pivot (squared diagonal of the
    factor) is at or below ``PIVOT_TOL``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {A.shape}")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix of size {A.shape[0]} is not positive definite") from exc
    pivots = np.diag(L) ** 2
    if A.shape[0] and pivots.min() <= PIVOT_TOL:
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"pivot {pivots[k]:.3e} at index {k} is below {PIVOT_TOL:g}")
    return L


def cholesky_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite ``A``.

    ``B`` may be a vector or a d x m matrix; the result has the same shape.
    Inputs are never modified.
    """
    B = np.asarray(B, dtype=np.float64)
    L = cholesky_factor(A)
    if B.shape[0] != L.shape[0]:
        raise ShapeMismatch(f"cannot solve {L.shape} system with right-hand side {B.shape}")
    return sla.cho_solve((L, True), B, check_finite=True)


def damp(A: np.ndarray, rho: float) -> np.ndarray:
    """Return ``A + rho * I``."""
    A = np.asarray(A, dtype=np.float64)
    out = A.copy()
    idx = np.arange(A.shape[0])
    out[idx, idx] += rho
    return out


def frobenius_norm(A: np.ndarray) -> float:
    A = np.asarray(A, dtype=np.float64)
    return float(np.sqrt(np.sum(A * A)))


def spectral_norm(A: np.ndarray, rtol: float = 1e-6, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value of a symmetric matrix by power iteration.

    Iterates on ``A^T A`` and tracks ``||A v||`` for unit ``v``: the
    estimate increases monotonically even when +/- eigenvalues tie.  The
    stopping threshold is ``rtol / 100`` on successive estimates so that a
    slowly converging tail still lands within ``rtol`` of the answer.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    scale = np.abs(A).max()
    if scale == 0.0:
        return 0.0
    M = A / scale
    v = np.random.default_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = M @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        if abs(nw - est) <= 0.01 * rtol * nw:
            est = nw
            break
        est = nw
        u = M.T @ w
        v = u / np.linalg.norm(u)
    return float(est * scale)


def matrix_mean(As: Sequence[np.ndarray]) -> np.ndarray:
    """Entrywise mean, summed sequentially in list order."""
    if len(As) == 0:
        raise EmptyList("matrix_mean needs at least one matrix")
    first = np.asarray(As[0], dtype=np.float64)
    acc = first.copy()
    for A in As[1:]:
        A = np.asarray(A, dtype=np.float64)
        if A.shape != first.shape:
            raise ShapeMismatch(f"shape {A.shape} differs from {first.shape}")
        acc = acc + A
    return acc / len(As)
