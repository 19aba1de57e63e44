"""Finite-difference verification of the loss gradients.

Random batches are drawn so that several intra-modal pairs fall inside the
(mu_down, mu_up) band, then rejected if any hinge, hardest-negative choice or
band edge is within ``margin`` of switching. Away from those kinks the losses
are smooth and central differences are accurate to ~1e-9.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .loss import EmbeddingBatch, LossConfig, LossKind, LossOutput, MHReduction, compute_loss
from .similarity import DeltaKind, cosine_matrix, delta_matrix

# perturbation radius between intra-modal neighbours that lands their distance
# inside the default (0.05, 0.5) band
_NEIGHBOUR_RADIUS = {DeltaKind.COS: 0.7, DeltaKind.MSD: 0.5, DeltaKind.L2: 0.25, DeltaKind.L1: 0.08}
_TIE_EPS = 1e-5


@dataclass(frozen=True)
class CheckResult:
    loss: LossKind
    delta: DeltaKind
    max_rel_error: float
    batches: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = x.astype(np.float64, copy=True)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error between two gradient arrays."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def _hinge_args(batch: EmbeddingBatch, alpha: float):
    s = cosine_matrix(batch.images, batch.texts)
    pos = np.diag(s)
    mask = batch.negative_mask()
    return [np.where(mask, alpha - pos[:, None] + m, -np.inf) for m in (s, s.T)]


def _top2_margin(h: np.ndarray) -> float:
    h = np.sort(h[np.isfinite(h)])[::-1]
    if h.size == 0:
        return np.inf
    out = abs(h[0])
    if h[0] > 0 and h.size > 1:
        out = min(out, h[0] - h[1])
    return out


def boundary_margin(batch: EmbeddingBatch, kind: LossKind, cfg: LossConfig) -> float:
    """Distance of ``batch`` from the nearest non-differentiable point of the loss."""
    kind = LossKind(kind)
    margins = [np.inf]
    for h in _hinge_args(batch, cfg.alpha):
        if kind is LossKind.SH:
            finite = h[np.isfinite(h)]
            margins.append(np.abs(finite).min() if finite.size else np.inf)
        elif cfg.mh_reduction is MHReduction.GLOBAL_MAX:
            margins.append(_top2_margin(h.ravel()))
        else:
            margins.extend(_top2_margin(row) for row in h)
    if kind is LossKind.IMC:
        pairs = np.triu(batch.negative_mask(), k=1)
        for v in (batch.images, batch.texts):
            d = delta_matrix(cfg.delta_kind, v)[pairs]
            margins.append(np.abs(d - cfg.mu_down).min())
            margins.append(np.abs(d - cfg.mu_up).min())
    return float(min(margins))


def _l1_tie_free(batch: EmbeddingBatch) -> bool:
    g = batch.group_ids
    for v in (batch.images, batch.texts):
        diff = np.abs(v[:, None, :] - v[None, :, :])
        off = g[:, None] != g[None, :]
        if diff[off].min() < _TIE_EPS:
            return False
    return True


def _band_active(batch: EmbeddingBatch, cfg: LossConfig) -> bool:
    pairs = np.triu(batch.negative_mask(), k=1)
    for v in (batch.images, batch.texts):
        d = delta_matrix(cfg.delta_kind, v)[pairs]
        if not np.any((d > cfg.mu_down) & (d < cfg.mu_up)):
            return False
    return True


def sample_batch(rng: np.random.Generator, delta_kind: DeltaKind, size: int = 8, dim: int = 16) -> EmbeddingBatch:
    """Random batch whose consecutive row pairs are intra-modal near neighbours.

    The last two rows share a group id so sibling exclusion is exercised.
    """
    radius = _NEIGHBOUR_RADIUS[DeltaKind(delta_kind)]
    base = rng.standard_normal((size, dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    images = base.copy()
    texts = base + 0.6 * rng.standard_normal((size, dim)) / np.sqrt(dim)
    for v in (images, texts):
        for j in range(0, size - 1, 2):
            step = rng.standard_normal(dim)
            v[j + 1] = v[j] + radius * rng.uniform(0.5, 1.5) * step / np.linalg.norm(step)
    groups = np.arange(size)
    groups[-1] = groups[-2]
    return EmbeddingBatch(images, texts, groups)


def check_combination(
    loss: LossKind,
    delta_kind: DeltaKind,
    rng: np.random.Generator,
    cfg: LossConfig | None = None,
    n_batches: int = 3,
    margin: float = 1e-3,
    tol: float = 1e-4,
    loss_fn: Callable[[EmbeddingBatch, LossConfig], LossOutput] | None = None,
    max_tries: int = 10_000,
) -> CheckResult:
    """Compare analytic and numeric gradients on ``n_batches`` admissible batches."""
    loss = LossKind(loss)
    cfg = cfg or LossConfig()
    cfg = LossConfig(**{**cfg.__dict__, "delta_kind": DeltaKind(delta_kind)})
    fn = loss_fn or (lambda b, c: compute_loss(loss, b, c))
    worst, done = 0.0, 0
    for _ in range(max_tries):
        if done == n_batches:
            break
        batch = sample_batch(rng, cfg.delta_kind)
        if boundary_margin(batch, loss, cfg) < margin:
            continue
        if loss is LossKind.IMC and not _band_active(batch, cfg):
            continue
        if cfg.delta_kind is DeltaKind.L1 and loss is LossKind.IMC and not _l1_tie_free(batch):
            continue
        out = fn(batch, cfg)
        b, d = batch.images.shape
        flat = np.concatenate([batch.images.ravel(), batch.texts.ravel()])

        def f(x):
            nb = EmbeddingBatch(x[: b * d].reshape(b, d), x[b * d:].reshape(b, d), batch.group_ids)
            return fn(nb, cfg).value

        num = numeric_grad(f, flat)
        ana = np.concatenate([out.d_images.ravel(), out.d_texts.ravel()])
        worst = max(worst, rel_error(ana, num))
        done += 1
    if done < n_batches:
        raise RuntimeError(f"only {done} admissible batches for {loss.value}/{cfg.delta_kind.value}")
    return CheckResult(loss, cfg.delta_kind, worst, done, tol)


def run_suite(seed: int = 0, cfg: LossConfig | None = None, n_batches: int = 3, tol: float = 1e-4) -> list[CheckResult]:
    """Every (loss, delta) combination: 3 losses x 4 distances."""
    rng = np.random.default_rng(seed)
    return [
        check_combination(loss, kind, rng, cfg, n_batches=n_batches, tol=tol)
        for loss, kind in itertools.product(LossKind, DeltaKind)
    ]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'loss':<5} {'delta':<5} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.loss.value:<5} {r.delta.value:<5} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
