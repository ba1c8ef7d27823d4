"""Small dense-matrix helpers with explicit numerical contracts."""

from __future__ import annotations

import numpy as np

SYMMETRY_TOL = 1e-10


def pinv(M: np.ndarray, tol: float | None = None, *, return_rank: bool = False):
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``tol * s_max`` are treated as zero.  The default
    relative cutoff is ``eps * max(rows, cols)``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("pinv expects a 2-D matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("pinv input must be finite")
    if tol is not None and tol < 0:
        raise ValueError("tol must be nonnegative")
    rows, cols = M.shape
    if M.size == 0:
        out = np.zeros((cols, rows))
        return (out, 0) if return_rank else out
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    rtol = np.finfo(float).eps * max(rows, cols) if tol is None else tol
    keep = s > rtol * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    out = (Vt.T * inv_s) @ U.T
    return (out, int(keep.sum())) if return_rank else out


def symmetrize(M: np.ndarray) -> np.ndarray:
    """(M + M') / 2 for square M."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"symmetrize needs a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


def is_symmetric(M: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(M), initial=0.0)))
    return float(np.max(np.abs(M - M.T), initial=0.0)) <= tol * scale


def min_eigenvalue(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    M = np.asarray(M, dtype=float)
    if not is_symmetric(M):
        raise ValueError("min_eigenvalue needs a symmetric matrix")
    return float(np.linalg.eigvalsh(symmetrize(M))[0])


def pairwise_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` with a fixed balanced binary tree.

    The result depends only on the data, not on how the caller chunked it,
    which keeps estimates identical across worker counts.
    """
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    if x.shape[0] == 0:
        return np.zeros(x.shape[1:])
    while x.shape[0] > 1:
        k = x.shape[0]
        half = k // 2
        paired = x[: 2 * half : 2] + x[1 : 2 * half : 2]
        x = np.concatenate([paired, x[2 * half :]], axis=0) if k % 2 else paired
    return x[0]


def mean_stderr(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error (ddof=1) using pairwise sums."""
    v = np.asarray(values, dtype=float).reshape(-1)
    k = v.size
    if k == 0:
        raise ValueError("no samples")
    mean = float(pairwise_sum(v)) / k
    if k == 1:
        return mean, 0.0
    var = float(pairwise_sum((v - mean) ** 2)) / (k - 1)
    return mean, float(np.sqrt(var / k))
