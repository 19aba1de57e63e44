"""Dense float64 helpers shared by every other module.

Vectors are 1-d ``numpy.ndarray`` and matrices are 2-d, row-major, with one
sample per row.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, NonFiniteError, ShapeError

#: norms below this are treated as zero
NORM_EPS = 1e-20


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed always yields the same stream."""
    return np.random.default_rng(seed)


def check_finite(a: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def as_vec(v, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-d array, got shape {a.shape}")
    return check_finite(a, name)


def as_mat(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-d array, got shape {a.shape}")
    return check_finite(a, name)


def xavier_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Glorot-uniform matrix with entries in ``[-a, a]``, ``a = sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs rows, cols >= 1, got ({rows}, {cols})")
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def matmul(a, b) -> np.ndarray:
    a = as_mat(a, "a")
    b = as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    v = as_vec(v)
    n = np.linalg.norm(v)
    if n < eps:
        raise DegenerateInputError(f"cannot normalize vector with norm {n:g}")
    return v / n


def l2_normalize_rows(m, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row; returns ``(normalized, norms)``."""
    m = as_mat(m)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < eps):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has norm {norms[bad]:g}")
    return m / norms[:, None], norms
