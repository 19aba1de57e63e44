"""Affine projection heads mapping each modality's features into the joint space."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .linalg import as_mat, l2_normalize_rows, xavier_init


class Modality(str, enum.Enum):
    IMAGE = "image"
    TEXT = "text"


PARAM_NAMES = ("w_img", "b_img", "w_txt", "b_txt")


@dataclass
class ProjectionModel:
    w_img: np.ndarray  # d_in_img x d
    b_img: np.ndarray  # d
    w_txt: np.ndarray  # d_in_txt x d
    b_txt: np.ndarray  # d
    dropout_p: float = 0.5
    dropout_on: frozenset[Modality] = field(default_factory=lambda: frozenset({Modality.TEXT}))
    normalize_output: bool = True

    def __post_init__(self):
        if self.w_img.shape[1] != self.w_txt.shape[1]:
            raise ShapeError("image and text heads must share the output dimension")
        if self.b_img.shape != (self.w_img.shape[1],) or self.b_txt.shape != (self.w_txt.shape[1],):
            raise ShapeError("bias shape does not match head output dimension")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        self.dropout_on = frozenset(Modality(m) for m in self.dropout_on)

    @classmethod
    def init(cls, rng: np.random.Generator, d_in_img: int, d_in_txt: int, d: int, **kw):
        """Xavier-uniform weights, zero biases."""
        return cls(
            xavier_init(rng, d_in_img, d),
            np.zeros(d),
            xavier_init(rng, d_in_txt, d),
            np.zeros(d),
            **kw,
        )

    @property
    def dim(self) -> int:
        return self.w_img.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ProjectionModel":
        return ProjectionModel(
            *(p.copy() for p in self.params().values()),
            dropout_p=self.dropout_p,
            dropout_on=self.dropout_on,
            normalize_output=self.normalize_output,
        )

    def head(self, modality: Modality) -> tuple[np.ndarray, np.ndarray]:
        if Modality(modality) is Modality.IMAGE:
            return self.w_img, self.b_img
        return self.w_txt, self.b_txt


@dataclass
class ForwardCache:
    inputs: np.ndarray  # features after dropout
    pre_norm: np.ndarray
    out: np.ndarray


def forward_cached(
    model: ProjectionModel,
    feats,
    modality: Modality,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardCache:
    modality = Modality(modality)
    w, b = model.head(modality)
    feats = as_mat(feats, "features")
    if feats.shape[1] != w.shape[0]:
        raise ShapeError(f"{modality.value} head expects {w.shape[0]} inputs, got {feats.shape[1]}")
    x = feats
    if train_mode and model.dropout_p > 0 and modality in model.dropout_on:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - model.dropout_p
        x = feats * ((rng.random(feats.shape) < keep) / keep)
    z = x @ w + b
    out = l2_normalize_rows(z)[0] if model.normalize_output else z
    return ForwardCache(x, z, out)


def forward(model, feats, modality, train_mode=False, rng=None) -> np.ndarray:
    """Project ``feats`` (one sample per row) through the head for ``modality``.

    In train mode, heads listed in ``dropout_on`` apply inverted dropout to
    their input features. Then the affine map, then row L2 normalization if
    ``normalize_output``.
    """
    return forward_cached(model, feats, modality, train_mode, rng).out


def backward(cache: ForwardCache, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(dW, db)`` of the head given ``dL/d(output)``."""
    z = cache.pre_norm
    if cache.out is not z:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        u = cache.out
        d_out = (d_out - (d_out * u).sum(axis=1, keepdims=True) * u) / norms
    return cache.inputs.T @ d_out, d_out.sum(axis=0)


def inverse_map_model(maps) -> ProjectionModel:
    """Exact inverse of a synthetic store's latent maps (dropout off).

    The maps have orthonormal rows, so projecting with their transposes
    recovers each class's latent direction.
    """
    d = maps.class_dirs.shape[1]
    return ProjectionModel(
        maps.image_map.T.copy(), np.zeros(d), maps.text_map.T.copy(), np.zeros(d), dropout_p=0.0
    )
