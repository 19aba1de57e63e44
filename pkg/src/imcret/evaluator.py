"""Bidirectional retrieval metrics: R@K and R-sum."""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .linalg import as_mat
from .model import Modality, forward
from .similarity import cosine_matrix

KS = (1, 5, 10)


class Direction(str, enum.Enum):
    I2T = "image_query_text"
    T2I = "text_query_image"


@dataclass(frozen=True)
class ScoreMatrix:
    """Query-by-candidate scores plus, per query, the relevant candidate ids."""

    scores: np.ndarray
    direction: Direction
    relevance: Sequence[np.ndarray]

    def __post_init__(self):
        scores = as_mat(self.scores, "scores")
        if len(self.relevance) != scores.shape[0]:
            raise ShapeError(f"{len(self.relevance)} relevance sets for {scores.shape[0]} queries")
        rel = tuple(np.asarray(r, dtype=np.int64) for r in self.relevance)
        for q, r in enumerate(rel):
            if r.size == 0:
                raise ShapeError(f"query {q} has no relevant candidate")
            if r.min() < 0 or r.max() >= scores.shape[1]:
                raise ShapeError(f"query {q} relevance out of range")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "relevance", rel)


def _best_ranks(scores: np.ndarray, relevance: Sequence[np.ndarray]) -> np.ndarray:
    """0-based rank of the first relevant candidate for each query.

    Candidates are ordered by descending score, equal scores by ascending index,
    so candidate j's rank is ``#{s > s_j} + #{s == s_j, index < j}``.
    """
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    idx = np.arange(scores.shape[1])
    for q, rel in enumerate(relevance):
        row = scores[q]
        s = row[rel][:, None]
        above = (row[None, :] > s) | ((row[None, :] == s) & (idx[None, :] < rel[:, None]))
        ranks[q] = above.sum(axis=1).min()
    return ranks


def query_ranks(sm: ScoreMatrix, workers: int = 1) -> np.ndarray:
    """Best relevant rank per query; ``workers > 1`` splits queries across threads."""
    if workers <= 1:
        return _best_ranks(sm.scores, sm.relevance)
    chunks = np.array_split(np.arange(sm.scores.shape[0]), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(
            lambda c: _best_ranks(sm.scores[c], [sm.relevance[i] for i in c]), chunks
        )
        return np.concatenate(list(parts))


def recall_at_k(sm: ScoreMatrix, k: int) -> float:
    """Percentage of queries with a relevant candidate in their top ``k``."""
    if not 1 <= k <= sm.scores.shape[1]:
        raise ValueError(f"k={k} outside [1, {sm.scores.shape[1]}]")
    return _recall(query_ranks(sm), k)


def _recall(ranks: np.ndarray, k: int) -> float:
    return 100.0 * float(np.count_nonzero(ranks < k)) / ranks.size


@dataclass
class RetrievalReport:
    i2t: dict[int, float]
    t2i: dict[int, float]
    folds: list["RetrievalReport"] = field(default_factory=list)

    @property
    def rsum(self) -> float:
        return r_sum(self.i2t, self.t2i)

    def fold_mean(self) -> "RetrievalReport":
        if not self.folds:
            raise ValueError("report has no folds")
        return mean_report(self.folds)

    def to_dict(self) -> dict:
        d = {
            Direction.I2T.value: {f"r{k}": self.i2t[k] for k in KS},
            Direction.T2I.value: {f"r{k}": self.t2i[k] for k in KS},
            "rsum": self.rsum,
        }
        if self.folds:
            d["folds"] = [f.to_dict() for f in self.folds]
            d["fold_mean"] = self.fold_mean().to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> list[float]:
        return [self.i2t[k] for k in KS] + [self.t2i[k] for k in KS] + [self.rsum]


CSV_HEADER = ["r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i", "rsum"]


def r_sum(i2t: dict[int, float], t2i: dict[int, float]) -> float:
    """R@1 + R@5 + R@10 over both directions."""
    missing = [(name, k) for name, d in (("i2t", i2t), ("t2i", t2i)) for k in KS if k not in d]
    if missing:
        raise KeyError(f"missing recall values: {missing}")
    return sum(i2t[k] for k in KS) + sum(t2i[k] for k in KS)


def mean_report(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    n = len(reports)
    return RetrievalReport(
        {k: sum(r.i2t[k] for r in reports) / n for k in KS},
        {k: sum(r.t2i[k] for r in reports) / n for k in KS},
    )


def retrieval_report(img_emb, txt_emb, caption_to_image, workers: int = 1) -> RetrievalReport:
    """R@{1,5,10} both ways from embeddings of a closed set of images and captions.

    ``caption_to_image[c]`` is the row in ``img_emb`` that caption ``c``
    describes. Scores are cosine similarities. When a pool has fewer than K
    candidates, R@K is taken at the pool size.
    """
    c2i = np.asarray(caption_to_image, dtype=np.int64)
    s = cosine_matrix(img_emb, txt_emb)
    caps_of = [np.flatnonzero(c2i == i) for i in range(s.shape[0])]
    i2t = ScoreMatrix(s, Direction.I2T, caps_of)
    t2i = ScoreMatrix(s.T, Direction.T2I, [c2i[c:c + 1] for c in range(c2i.size)])
    out = []
    for sm in (i2t, t2i):
        ranks = query_ranks(sm, workers)
        out.append({k: _recall(ranks, min(k, sm.scores.shape[1])) for k in KS})
    return RetrievalReport(out[0], out[1])


def evaluate(model, store, split, workers: int = 1) -> RetrievalReport:
    """Embed the test split in eval mode and score retrieval both ways.

    The headline numbers pool the whole test set. When the split has folds,
    each fold is also scored on its own and kept in ``folds``;
    ``fold_mean()`` averages them.
    """
    report = evaluate_ids(model, store, split.test_ids, workers)
    if split.folds:
        report.folds = [evaluate_ids(model, store, f, workers) for f in split.folds]
    return report


def evaluate_ids(model, store, image_ids, workers: int = 1) -> RetrievalReport:
    """Retrieval over the images ``image_ids`` and all of their captions."""
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if image_ids.size == 0:
        raise ValueError("no images to evaluate")
    caps = store.captions_of(image_ids)
    local = {int(g): n for n, g in enumerate(image_ids)}
    c2i = np.array([local[int(g)] for g in store.caption_to_image[caps]])
    img = forward(model, store.image_feats[image_ids], Modality.IMAGE)
    txt = forward(model, store.text_feats[caps], Modality.TEXT)
    return retrieval_report(img, txt, c2i, workers)
