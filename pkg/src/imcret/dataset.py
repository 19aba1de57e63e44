"""Feature stores, file formats, synthetic data, splits and batching.

Feature files ("CMFV") are little-endian binary::

    b"CMFV" | version u32 | count u32 | dim u32 | count*dim float64

The caption index is a CSV with header ``caption_id,image_id`` mapping each
caption row to the image row it describes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, ShapeError
from .linalg import as_mat, make_rng

FEATURE_MAGIC = b"CMFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SyntheticMaps:
    """Latent-to-feature maps used by :func:`generate_synthetic`."""

    image_map: np.ndarray  # latent_dim x d_in_img
    text_map: np.ndarray  # latent_dim x d_in_txt
    class_dirs: np.ndarray  # num_classes x latent_dim


@dataclass(frozen=True)
class FeatureStore:
    image_feats: np.ndarray
    text_feats: np.ndarray
    caption_to_image: np.ndarray
    maps: SyntheticMaps | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        try:
            img = as_mat(self.image_feats, "image features")
            txt = as_mat(self.text_feats, "text features")
        except ValueError as e:
            raise DataError(str(e)) from e
        c2i = np.asarray(self.caption_to_image, dtype=np.int64)
        if c2i.shape != (txt.shape[0],):
            raise DataError(f"index has {c2i.size} entries for {txt.shape[0]} captions")
        if c2i.size and (c2i.min() < 0 or c2i.max() >= img.shape[0]):
            bad = c2i[(c2i < 0) | (c2i >= img.shape[0])][0]
            raise DataError(f"index references image {bad}, store has {img.shape[0]} images")
        missing = np.setdiff1d(np.arange(img.shape[0]), c2i)
        if missing.size:
            raise DataError(f"image {missing[0]} has no caption")
        object.__setattr__(self, "image_feats", img)
        object.__setattr__(self, "text_feats", txt)
        object.__setattr__(self, "caption_to_image", c2i)

    @property
    def num_images(self) -> int:
        return self.image_feats.shape[0]

    @property
    def num_captions(self) -> int:
        return self.text_feats.shape[0]

    def captions_of(self, image_ids) -> np.ndarray:
        """Caption rows (ascending) belonging to any of ``image_ids``."""
        return np.flatnonzero(np.isin(self.caption_to_image, image_ids))

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return (
            np.array_equal(self.image_feats, other.image_feats)
            and np.array_equal(self.text_feats, other.text_feats)
            and np.array_equal(self.caption_to_image, other.caption_to_image)
        )


# file formats --------------------------------------------------------------


def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f8")
    count, dim = feats.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, count, dim))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != count * dim * 8:
        raise DataError(f"{path}: expected {count}x{dim} floats, got {len(body)} bytes")
    feats = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(count, dim)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite feature values")
    return feats


def write_index(path, caption_to_image) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["caption_id", "image_id"])
        for cid, iid in enumerate(caption_to_image):
            w.writerow([cid, int(iid)])


def read_index(path, num_captions: int | None = None) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["caption_id", "image_id"]:
            raise DataError(f"{path}: expected header caption_id,image_id")
        try:
            rows = [(int(r["caption_id"]), int(r["image_id"])) for r in reader]
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}: {e}") from e
    n = num_captions if num_captions is not None else len(rows)
    c2i = np.full(n, -1, dtype=np.int64)
    for cid, iid in rows:
        if not 0 <= cid < n:
            raise DataError(f"{path}: caption id {cid} out of range")
        if c2i[cid] != -1:
            raise DataError(f"{path}: caption id {cid} listed twice")
        c2i[cid] = iid
    if np.any(c2i < 0):
        raise DataError(f"{path}: caption {int(np.argmin(c2i))} has no image")
    return c2i


def load_store(image_path, text_path, index_path) -> FeatureStore:
    img = read_features(image_path)
    txt = read_features(text_path)
    return FeatureStore(img, txt, read_index(index_path, txt.shape[0]))


def save_store(store: FeatureStore, image_path, text_path, index_path) -> None:
    write_features(image_path, store.image_feats)
    write_features(text_path, store.text_feats)
    write_index(index_path, store.caption_to_image)


# synthetic data ------------------------------------------------------------


def _orthonormal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` map with orthonormal rows (``rows <= cols``)."""
    q, r = np.linalg.qr(rng.standard_normal((cols, rows)))
    return (q * np.sign(np.diag(r))).T


def generate_synthetic(
    rng: np.random.Generator,
    num_classes: int = 100,
    captions_per_image: int = 5,
    d_in_img: int = 64,
    d_in_txt: int = 64,
    noise_sigma: float = 0.05,
    latent_dim: int = 16,
    identity_maps: bool = False,
) -> FeatureStore:
    """Class-structured image/caption features.

    Each class gets a random unit direction in a ``latent_dim`` space. Its image
    is that direction pushed through a fixed image map plus Gaussian noise; each
    of its captions goes through a separate text map with independent noise.
    The maps have orthonormal rows, so their transposes invert them exactly.
    """
    if min(num_classes, captions_per_image, d_in_img, d_in_txt, latent_dim) < 1:
        raise ValueError("all counts and dimensions must be >= 1")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if latent_dim > min(d_in_img, d_in_txt):
        raise ShapeError("latent_dim cannot exceed the feature dimensions")
    if identity_maps:
        if not d_in_img == d_in_txt == latent_dim:
            raise ShapeError("identity maps need d_in_img == d_in_txt == latent_dim")
        img_map = np.eye(latent_dim)
        txt_map = np.eye(latent_dim)
    else:
        img_map = _orthonormal_rows(rng, latent_dim, d_in_img)
        txt_map = _orthonormal_rows(rng, latent_dim, d_in_txt)

    dirs = rng.standard_normal((num_classes, latent_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    images = dirs @ img_map + noise_sigma * rng.standard_normal((num_classes, d_in_img))
    c2i = np.repeat(np.arange(num_classes), captions_per_image)
    texts = dirs[c2i] @ txt_map + noise_sigma * rng.standard_normal((c2i.size, d_in_txt))
    return FeatureStore(images, texts, c2i, SyntheticMaps(img_map, txt_map, dirs))


# splits and batching -------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    folds: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train_ids, self.val_ids, self.test_ids)]
        for name, p in zip(("train", "val", "test"), parts):
            if np.unique(p).size != p.size:
                raise DataError(f"{name} ids contain duplicates")
        joined = np.concatenate(parts)
        if np.unique(joined).size != joined.size:
            raise DataError("train/val/test ids overlap")
        object.__setattr__(self, "train_ids", parts[0])
        object.__setattr__(self, "val_ids", parts[1])
        object.__setattr__(self, "test_ids", parts[2])
        if self.folds is not None:
            folds = tuple(np.asarray(f, dtype=np.int64) for f in self.folds)
            if len({f.size for f in folds}) > 1:
                raise DataError("folds must have equal sizes")
            if not np.array_equal(np.sort(np.concatenate(folds)), np.sort(parts[2])):
                raise DataError("folds must partition the test ids")
            object.__setattr__(self, "folds", folds)


def make_split(
    num_images: int,
    seed: int,
    val_frac: float = 0.1,
    test_frac: float = 0.3,
    num_folds: int | None = 5,
) -> SplitSpec:
    """Seeded random split of image ids.

    The test set is trimmed to a multiple of ``num_folds`` (extra ids go to
    training) and cut into contiguous equal folds of its shuffled order.
    """
    order = make_rng(seed).permutation(num_images)
    n_val = int(round(val_frac * num_images))
    n_test = int(round(test_frac * num_images))
    if num_folds:
        n_test -= n_test % num_folds
    if n_test < 1 or num_images - n_val - n_test < 1:
        raise DataError(f"cannot split {num_images} images into non-empty train/test sets")
    test = order[:n_test]
    val = order[n_test:n_test + n_val]
    train = order[n_test + n_val:]
    folds = tuple(np.array_split(test, num_folds)) if num_folds else None
    return SplitSpec(np.sort(train), np.sort(val), test, folds)


@dataclass
class BatchPlan:
    seed: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        self._rng = make_rng(self.seed)

    def ordering(self, caption_ids: np.ndarray) -> np.ndarray:
        """Next epoch's permutation of ``caption_ids``."""
        return self._rng.permutation(caption_ids)


@dataclass(frozen=True)
class TrainBatch:
    caption_ids: np.ndarray
    image_ids: np.ndarray
    image_feats: np.ndarray
    text_feats: np.ndarray


def batches(store: FeatureStore, split: SplitSpec, plan: BatchPlan) -> Iterator[TrainBatch]:
    """One epoch of training batches.

    Every training caption appears once, paired with its image's features. A
    trailing batch with fewer than 2 rows is dropped.
    """
    caps = store.captions_of(split.train_ids)
    if caps.size == 0:
        raise DataError("training split has no captions")
    order = plan.ordering(caps)
    for start in range(0, order.size, plan.batch_size):
        cid = order[start:start + plan.batch_size]
        if cid.size < 2:
            continue
        iid = store.caption_to_image[cid]
        yield TrainBatch(cid, iid, store.image_feats[iid], store.text_feats[cid])
