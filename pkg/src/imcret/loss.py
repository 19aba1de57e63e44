"""Bidirectional ranking losses over one mini-batch of paired embeddings.

Row ``n`` of ``images`` and row ``n`` of ``texts`` are a positive pair. Any two
rows with different group ids are negatives of each other; rows that share a
group id (several captions of one image) are never used as negatives.

All losses return a :class:`LossOutput` carrying the scalar value and exact
(sub)gradients with respect to both embedding matrices.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientBatchError, ShapeError
from .linalg import as_mat
from .similarity import (
    DeltaKind,
    cosine_matrix,
    cosine_matrix_backward,
    delta_matrix,
    delta_matrix_backward,
)


class MHReduction(str, enum.Enum):
    PER_ANCHOR = "per-anchor"
    GLOBAL_MAX = "global-max"


class IMCVariant(str, enum.Enum):
    AS_WRITTEN = "as-written"
    REPULSIVE = "repulsive"


class LossKind(str, enum.Enum):
    SH = "sh"
    MH = "mh"
    IMC = "imc"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    lam: float = 1.0
    mu_down: float = 0.05
    mu_up: float = 0.5
    delta_kind: DeltaKind = DeltaKind.L1
    mh_reduction: MHReduction = MHReduction.PER_ANCHOR
    imc_variant: IMCVariant = IMCVariant.AS_WRITTEN

    def __post_init__(self):
        object.__setattr__(self, "delta_kind", DeltaKind(self.delta_kind))
        object.__setattr__(self, "mh_reduction", MHReduction(self.mh_reduction))
        object.__setattr__(self, "imc_variant", IMCVariant(self.imc_variant))
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.mu_down < self.mu_up:
            raise ValueError(f"need 0 <= mu_down < mu_up, got ({self.mu_down}, {self.mu_up})")


@dataclass(frozen=True)
class EmbeddingBatch:
    images: np.ndarray
    texts: np.ndarray
    group_ids: np.ndarray

    def __post_init__(self):
        images = as_mat(self.images, "images")
        texts = as_mat(self.texts, "texts")
        groups = np.asarray(self.group_ids)
        if images.shape != texts.shape:
            raise ShapeError(f"images {images.shape} and texts {texts.shape} differ")
        if groups.shape != (images.shape[0],):
            raise ShapeError(f"expected {images.shape[0]} group ids, got shape {groups.shape}")
        if images.shape[0] < 2:
            raise InsufficientBatchError("a batch needs at least 2 rows")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "texts", texts)
        object.__setattr__(self, "group_ids", groups)

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def negative_mask(self) -> np.ndarray:
        """``mask[n, m]`` is True when rows n and m belong to different groups."""
        g = self.group_ids
        return g[:, None] != g[None, :]


@dataclass(frozen=True)
class LossOutput:
    value: float
    d_images: np.ndarray
    d_texts: np.ndarray

    def __add__(self, other: "LossOutput") -> "LossOutput":
        return LossOutput(
            self.value + other.value,
            self.d_images + other.d_images,
            self.d_texts + other.d_texts,
        )


def _hinges(batch: EmbeddingBatch, alpha: float):
    """Pre-clip hinge arguments for both directions.

    ``h_i2t[n, m] = alpha - S[n, n] + S[n, m]`` (image n anchors, text m negative)
    and ``h_t2i[n, m] = alpha - S[n, n] + S[m, n]`` (text n anchors, image m
    negative), with ``S[n, m] = cos(image_n, text_m)``. Invalid negatives are
    set to ``-inf``.
    """
    s = cosine_matrix(batch.images, batch.texts)
    pos = np.diag(s)
    mask = batch.negative_mask()
    h_i2t = np.where(mask, alpha - pos[:, None] + s, -np.inf)
    h_t2i = np.where(mask, alpha - pos[:, None] + s.T, -np.inf)
    return s, h_i2t, h_t2i


def _score_grad(w_i2t: np.ndarray, w_t2i: np.ndarray) -> np.ndarray:
    """Turn per-hinge weights into ``dL/dS``.

    Each active i2t hinge (n, m) adds ``+w`` at ``S[n, m]`` and ``-w`` at
    ``S[n, n]``; each active t2i hinge (n, m) adds ``+w`` at ``S[m, n]`` and
    ``-w`` at ``S[n, n]``.
    """
    g = w_i2t + w_t2i.T
    g[np.diag_indices_from(g)] -= w_i2t.sum(axis=1) + w_t2i.sum(axis=1)
    return g


def _backprop(batch: EmbeddingBatch, value: float, g: np.ndarray) -> LossOutput:
    d_img, d_txt = cosine_matrix_backward(batch.images, batch.texts, g)
    return LossOutput(float(value), d_img, d_txt)


def sh_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Sum of hinges over every valid negative in both directions, divided by B."""
    _, h_i2t, h_t2i = _hinges(batch, cfg.alpha)
    b = batch.size
    a_i2t = h_i2t > 0
    a_t2i = h_t2i > 0
    value = (h_i2t[a_i2t].sum() + h_t2i[a_t2i].sum()) / b
    g = _score_grad(a_i2t / b, a_t2i / b)
    return _backprop(batch, value, g)


def _argmax_rows(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # np.argmax returns the first maximal index, which is the tie rule we want
    idx = np.argmax(h, axis=1)
    return idx, h[np.arange(h.shape[0]), idx]


def mh_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Hardest-negative hinge loss.

    ``PER_ANCHOR``: for each anchor keep only its largest hinge, sum both
    directions and divide by B. ``GLOBAL_MAX``: the single largest hinge over
    all (anchor, negative) pairs, per direction, unnormalized.
    """
    _, h_i2t, h_t2i = _hinges(batch, cfg.alpha)
    b = batch.size
    w_i2t = np.zeros_like(h_i2t)
    w_t2i = np.zeros_like(h_t2i)
    if cfg.mh_reduction is MHReduction.PER_ANCHOR:
        value = 0.0
        for h, w in ((h_i2t, w_i2t), (h_t2i, w_t2i)):
            idx, top = _argmax_rows(h)
            active = top > 0
            value += top[active].sum()
            w[np.flatnonzero(active), idx[active]] = 1.0 / b
        value /= b
    else:
        value = 0.0
        for h, w in ((h_i2t, w_i2t), (h_t2i, w_t2i)):
            n, m = np.unravel_index(np.argmax(h), h.shape)
            if h[n, m] > 0:
                value += h[n, m]
                w[n, m] = 1.0
    return _backprop(batch, value, _score_grad(w_i2t, w_t2i))


def _band(d: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Band penalty values and their derivative w.r.t. the distance."""
    inside = (d > cfg.mu_down) & (d < cfg.mu_up)
    if cfg.imc_variant is IMCVariant.AS_WRITTEN:
        return np.where(inside, d, 0.0), inside.astype(np.float64)
    return np.where(inside, cfg.mu_up - d, 0.0), -inside.astype(np.float64)


def imc_term(v, group_ids, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Intra-modal constraint for one modality; returns ``(value, d_v)``.

    Sums the band penalty over unordered pairs of rows from different groups
    whose distance lies strictly inside ``(mu_down, mu_up)``, scales by lambda
    and divides by the number of such pairs (0 when there are none).
    """
    v = as_mat(v, "v")
    groups = np.asarray(group_ids)
    if v.shape[0] < 2:
        raise InsufficientBatchError("a batch needs at least 2 rows")
    if groups.shape != (v.shape[0],):
        raise ShapeError(f"expected {v.shape[0]} group ids, got shape {groups.shape}")
    d = delta_matrix(cfg.delta_kind, v)
    pairs = np.triu(groups[:, None] != groups[None, :], k=1)
    pen, slope = _band(d, cfg)
    contributing = pairs & (slope != 0)
    count = int(contributing.sum())
    if count == 0:
        return 0.0, np.zeros_like(v)
    scale = cfg.lam / count
    value = scale * pen[contributing].sum()
    grad = np.where(contributing, scale * slope, 0.0)
    return float(value), delta_matrix_backward(cfg.delta_kind, v, grad)


def imc_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Hardest-negative loss plus the intra-modal constraint on both modalities."""
    out = mh_loss(batch, cfg)
    vi, gi = imc_term(batch.images, batch.group_ids, cfg)
    vt, gt = imc_term(batch.texts, batch.group_ids, cfg)
    return out + LossOutput(vi + vt, gi, gt)


LOSSES = {LossKind.SH: sh_loss, LossKind.MH: mh_loss, LossKind.IMC: imc_loss}


def compute_loss(kind: LossKind | str, batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    return LOSSES[LossKind(kind)](batch, cfg)
