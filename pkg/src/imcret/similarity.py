"""Pairwise scores and distances with analytic gradients.

``ell_cosine_sim`` is the score used inside the ranking hinges (higher means
more related). ``delta`` is the intra-modal distance family: cosine distance,
MSD (sum of squared differences), L1 and Euclidean L2.

The ``*_matrix`` / ``*_backward`` pairs are batched versions used by the
losses: the forward returns all pairwise values, the backward maps an upstream
gradient over those pairs onto the input rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import as_mat, as_vec, l2_normalize_rows


class DeltaKind(str, enum.Enum):
    COS = "cos"
    MSD = "msd"
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class ScoreGrad:
    value: float
    d_x: np.ndarray
    d_y: np.ndarray


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = as_vec(x, "x")
    y = as_vec(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def ell_cosine_sim(x, y) -> ScoreGrad:
    """Cosine similarity ``x.y / (|x| |y|)`` and its partials."""
    x, y = _pair(x, y)
    (xh, yh), (nx, ny) = _unit2(x, y)
    c = float(np.clip(xh @ yh, -1.0, 1.0))
    return ScoreGrad(c, (yh - c * xh) / nx, (xh - c * yh) / ny)


def _unit2(x, y):
    units, norms = l2_normalize_rows(np.stack([x, y]))
    return (units[0], units[1]), (norms[0], norms[1])


def delta(kind: DeltaKind | str, x, y) -> ScoreGrad:
    """Intra-modal distance between ``x`` and ``y`` with partials.

    The L1 subgradient at a tied coordinate is 0; the L2 gradient at ``x == y``
    is 0.
    """
    kind = DeltaKind(kind)
    x, y = _pair(x, y)
    diff = x - y
    if kind is DeltaKind.COS:
        s = ell_cosine_sim(x, y)
        return ScoreGrad(1.0 - s.value, -s.d_x, -s.d_y)
    if kind is DeltaKind.MSD:
        g = 2.0 * diff
        return ScoreGrad(float(diff @ diff), g, -g)
    if kind is DeltaKind.L1:
        g = np.sign(diff)
        return ScoreGrad(float(np.abs(diff).sum()), g, -g)
    dist = float(np.sqrt(diff @ diff))
    g = diff / dist if dist > 0 else np.zeros_like(diff)
    return ScoreGrad(dist, g, -g)


# batched forms -------------------------------------------------------------


def cosine_matrix(x, y) -> np.ndarray:
    """``S[n, m] = cos(x_n, y_m)`` for every row pair."""
    xh, _ = l2_normalize_rows(as_mat(x, "x"))
    yh, _ = l2_normalize_rows(as_mat(y, "y"))
    return xh @ yh.T


def cosine_matrix_backward(x, y, grad) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``dL/dS`` for ``S = cosine_matrix(x, y)`` back to ``(dL/dx, dL/dy)``."""
    xh, nx = l2_normalize_rows(as_mat(x, "x"))
    yh, ny = l2_normalize_rows(as_mat(y, "y"))
    s = xh @ yh.T
    gs = grad * s
    dx = (grad @ yh - gs.sum(axis=1)[:, None] * xh) / nx[:, None]
    dy = (grad.T @ xh - gs.sum(axis=0)[:, None] * yh) / ny[:, None]
    return dx, dy


def delta_matrix(kind: DeltaKind | str, v) -> np.ndarray:
    """``D[n, m] = delta(kind, v_n, v_m)`` over all rows of ``v`` (symmetric, zero diagonal)."""
    kind = DeltaKind(kind)
    v = as_mat(v, "v")
    if kind is DeltaKind.COS:
        vh, _ = l2_normalize_rows(v)
        d = np.clip(1.0 - vh @ vh.T, 0.0, 2.0)
        np.fill_diagonal(d, 0.0)
        return d
    diff = v[:, None, :] - v[None, :, :]
    if kind is DeltaKind.L1:
        return np.abs(diff).sum(axis=2)
    sq = (diff * diff).sum(axis=2)
    return sq if kind is DeltaKind.MSD else np.sqrt(sq)


def delta_matrix_backward(kind: DeltaKind | str, v, grad) -> np.ndarray:
    """Pull ``dL/dD`` for ``D = delta_matrix(kind, v)`` back to ``dL/dv``.

    ``grad`` need not be symmetric; entry ``(n, m)`` is treated as the weight of
    ``delta(v_n, v_m)``.
    """
    kind = DeltaKind(kind)
    v = as_mat(v, "v")
    w = grad + grad.T  # delta is symmetric, so both slots contribute alike
    if kind is DeltaKind.COS:
        dx, dy = cosine_matrix_backward(v, v, -grad)
        return dx + dy
    diff = v[:, None, :] - v[None, :, :]
    if kind is DeltaKind.MSD:
        return 2.0 * np.einsum("nm,nmk->nk", w, diff)
    if kind is DeltaKind.L1:
        return np.einsum("nm,nmk->nk", w, np.sign(diff))
    dist = np.sqrt((diff * diff).sum(axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(dist > 0, w / dist, 0.0)
    return np.einsum("nm,nmk->nk", scale, diff)
