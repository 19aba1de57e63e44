"""Adam with step decay, the epoch loop, checkpoints and the metrics log."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BatchPlan, FeatureStore, SplitSpec, batches
from .errors import DataError, DivergenceError, NonFiniteError, ShapeError
from .evaluator import evaluate_ids
from .loss import EmbeddingBatch, LossConfig, LossKind, compute_loss
from .model import PARAM_NAMES, Modality, ProjectionModel, backward, forward_cached

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"IMCK"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "lr", "train_loss", "val_rsum"]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 2e-4
    decay_every: int = 15
    decay_factor: float = 0.1
    seed: int = 0
    loss: LossKind = LossKind.IMC
    loss_cfg: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.lr0 < 0 or self.decay_every < 1 or self.decay_factor <= 0:
            raise ValueError("need lr0 >= 0, decay_every >= 1, decay_factor > 0")


def lr_at_epoch(spec: TrainSpec, epoch: int) -> float:
    return spec.lr0 * spec.decay_factor ** (epoch // spec.decay_every)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_rsum: float


def loss_and_grads(model: ProjectionModel, img_feats, txt_feats, group_ids, spec: TrainSpec,
                   train_mode: bool = False, rng=None):
    """Loss of one batch and its gradients w.r.t. every model parameter."""
    ci = forward_cached(model, img_feats, Modality.IMAGE, train_mode, rng)
    ct = forward_cached(model, txt_feats, Modality.TEXT, train_mode, rng)
    out = compute_loss(spec.loss, EmbeddingBatch(ci.out, ct.out, group_ids), spec.loss_cfg)
    dw_i, db_i = backward(ci, out.d_images)
    dw_t, db_t = backward(ct, out.d_texts)
    return out.value, {"w_img": dw_i, "b_img": db_i, "w_txt": dw_t, "b_txt": db_t}


def train(
    store: FeatureStore,
    model: ProjectionModel,
    split: SplitSpec,
    spec: TrainSpec,
) -> tuple[ProjectionModel, list[EpochMetrics]]:
    """Train ``model`` (a copy; the argument is untouched).

    Returns the snapshot with the best validation R-sum (the latest one on
    ties) and the per-epoch log. Without a validation split the final model is
    returned and ``val_rsum`` is NaN.
    """
    if store.num_captions == 0 or split.train_ids.size == 0:
        raise DataError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(spec.seed)
    plan = BatchPlan(int(rng.integers(2**63)), spec.batch_size)
    dropout_rng = np.random.default_rng(int(rng.integers(2**63)))
    state = AdamState(lr=spec.lr0)
    params = model.params()

    history: list[EpochMetrics] = []
    best, best_rsum = model.copy(), -math.inf
    for epoch in range(spec.epochs):
        state.lr = lr_at_epoch(spec, epoch)
        total, count = 0.0, 0
        for b in batches(store, split, plan):
            value, grads = loss_and_grads(
                model, b.image_feats, b.text_feats, b.image_ids, spec, True, dropout_rng
            )
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            try:
                adam_step(state, params, grads)
            except NonFiniteError as e:
                raise DivergenceError(f"epoch {epoch}: {e}") from e
            total += value * b.caption_ids.size
            count += b.caption_ids.size
        train_loss = total / count if count else 0.0
        if split.val_ids.size:
            val_rsum = evaluate_ids(model, store, split.val_ids).rsum
        else:
            val_rsum = math.nan
        history.append(EpochMetrics(epoch, state.lr, train_loss, val_rsum))
        log.info("epoch %d lr %.3g loss %.6f val_rsum %.2f", epoch, state.lr, train_loss, val_rsum)
        if not split.val_ids.size or val_rsum >= best_rsum:
            best, best_rsum = model.copy(), val_rsum
    return best, history


# persistence ---------------------------------------------------------------


def write_metrics(path, history: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.train_loss), repr(h.val_rsum)])


def save_checkpoint(path, model: ProjectionModel) -> None:
    """Binary checkpoint: magic, version, then (name, rows, cols, float64 data) per tensor."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        for name, p in model.params().items():
            mat = np.atleast_2d(p)
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<II", *mat.shape))
            f.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_checkpoint(path, **model_kw) -> ProjectionModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, tensors = 8, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode()
            rows, cols = struct.unpack_from("<II", raw, pos + 4 + n)
            pos += 12 + n
            size = rows * cols * 8
            if pos + size > len(raw):
                raise DataError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").astype(np.float64).reshape(rows, cols)
            pos += size
    except struct.error as e:
        raise DataError(f"{path}: truncated checkpoint") from e
    missing = set(PARAM_NAMES) - tensors.keys()
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    return ProjectionModel(
        tensors["w_img"], tensors["b_img"][0], tensors["w_txt"], tensors["b_txt"][0], **model_kw
    )
