"""Retrieval metrics and the unsupervised PQ baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TooFewItems, UnknownId
from .index import RetrievalIndex, compute_lut, rank, score_all
from .numerics import SubspaceShape, l2_normalize, split_subvectors
from .quantizer import Codebook


@dataclass
class RelevanceJudge:
    """Relevance by shared labels.

    ``labels`` maps item id to a row of a multi-hot matrix. In single-label
    mode two items are relevant when their label rows are identical; in
    multi-label mode when they share at least one concept.
    """

    labels: np.ndarray  # (N, Nc) bool, row i belongs to id i
    multi_label: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(bool)

    def _rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.labels)):
            bad = ids[(ids < 0) | (ids >= len(self.labels))][0]
            raise UnknownId(f"id {bad} is not in the label table")
        return self.labels[ids]

    def relevance(self, query_id: int, ids) -> np.ndarray:
        q = self._rows([query_id])[0]
        rows = self._rows(ids)
        if self.multi_label:
            return (rows & q).any(axis=1)
        return (rows == q).all(axis=1) & q.any()


def average_precision_from_relevance(rel: np.ndarray, cutoff: int | None = None) -> np.ndarray:
    """AP for ranked relevance rows ``(..., N)`` of booleans.

    ``R`` is the number of relevant items in the (possibly truncated) ranking;
    AP is 0 when there is none.
    """
    rel = np.asarray(rel, dtype=bool)
    if cutoff is not None:
        rel = rel[..., :cutoff]
    hits = np.cumsum(rel, axis=-1)
    positions = np.arange(1, rel.shape[-1] + 1)
    total = hits[..., -1] if rel.shape[-1] else np.zeros(rel.shape[:-1])
    prec_sum = np.sum(np.where(rel, hits / positions, 0.0), axis=-1)
    return np.where(total > 0, prec_sum / np.maximum(total, 1), 0.0)


def average_precision(ranked_ids, judge: RelevanceJudge, query_id: int, cutoff: int | None = None) -> float:
    rel = judge.relevance(query_id, ranked_ids)
    return float(average_precision_from_relevance(rel, cutoff))


def precision_at_k(ranked_ids, judge: RelevanceJudge, query_id: int, k: int) -> float:
    rel = judge.relevance(query_id, np.asarray(ranked_ids)[:k])
    return float(rel.sum()) / k


def rank_database(query_features: np.ndarray, index: RetrievalIndex, chunk: int = 256):
    """Yield ``(query_offset, ranked ids)`` for chunks of queries."""
    ids = index.item_ids()
    for start in range(0, len(query_features), chunk):
        luts = compute_lut(query_features[start : start + chunk], index.codebook)
        scores = score_all(luts, index.codes)
        yield start, np.stack([ids[rank(s, ids)] for s in scores]).astype(np.int64)


def evaluate(
    query_features: np.ndarray,
    query_ids,
    index: RetrievalIndex,
    judge: RelevanceJudge,
    cutoff: int | None = None,
    precision_ks=(),
) -> dict[str, float]:
    """mAP (and precision@k) of asymmetric search for every query."""
    query_ids = np.asarray(query_ids, dtype=np.int64)
    if len(query_ids) == 0:
        return {"map": 0.0, **{f"p@{k}": 0.0 for k in precision_ks}}
    aps = []
    precisions = {k: [] for k in precision_ks}
    if index.count == 0:
        return {"map": 0.0, **{f"p@{k}": 0.0 for k in precision_ks}}
    for start, ranked in rank_database(query_features, index):
        qids = query_ids[start : start + len(ranked)]
        rel = np.stack([judge.relevance(q, r) for q, r in zip(qids, ranked)])
        aps.append(average_precision_from_relevance(rel, cutoff))
        for k in precision_ks:
            precisions[k].append(rel[:, :k].sum(axis=1) / k)
    out = {"map": float(np.mean(np.concatenate(aps)))}
    for k in precision_ks:
        out[f"p@{k}"] = float(np.mean(np.concatenate(precisions[k])))
    return out


def mean_ap(query_features, query_ids, index: RetrievalIndex, judge: RelevanceJudge, cutoff: int | None = None) -> float:
    return evaluate(query_features, query_ids, index, judge, cutoff)["map"]


def kmeans_objective(blocks: np.ndarray, Z: np.ndarray) -> float:
    """Mean similarity of every sub-vector to its best codeword."""
    return float(np.einsum("nmd,mkd->nmk", blocks, Z).max(axis=-1).mean())


def pq_baseline_train(
    features: np.ndarray,
    shape: SubspaceShape,
    iterations: int = 25,
    seed: int = 0,
    init: np.ndarray | None = None,
    history: list | None = None,
) -> Codebook:
    """Spherical k-means per subspace (cosine assignment, normalized means).

    Codewords start from ``K`` distinct sampled sub-vectors. A cluster that
    loses all its members is reseeded with the sub-vector farthest from its
    assigned codeword. If ``history`` is given, the mean assigned
    similarity is appended after every iteration.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) < shape.K:
        raise TooFewItems(f"need at least K={shape.K} items, got {len(features)}")
    blocks = split_subvectors(features, shape)  # (N, M, d)
    N = len(features)
    if init is not None:
        Z = np.array(init, dtype=np.float64)
    else:
        rng = np.random.default_rng(seed)
        Z = np.empty((shape.M, shape.K, shape.d))
        for m in range(shape.M):
            uniq = np.unique(blocks[:, m, :], axis=0, return_index=True)[1]
            pool = np.sort(uniq)
            if len(pool) < shape.K:
                raise TooFewItems(f"subspace {m} has fewer than K={shape.K} distinct sub-vectors")
            Z[m] = blocks[rng.choice(pool, size=shape.K, replace=False), m, :]
        Z = l2_normalize(Z)
    for _ in range(iterations):
        for m in range(shape.M):
            x = blocks[:, m, :]
            sims = x @ Z[m].T
            assign = np.argmax(sims, axis=1)
            best = sims[np.arange(N), assign]
            sums = np.zeros((shape.K, shape.d))
            np.add.at(sums, assign, x)
            counts = np.bincount(assign, minlength=shape.K)
            taken = np.zeros(N, dtype=bool)
            for k in range(shape.K):
                norm = np.linalg.norm(sums[k])
                if counts[k] > 0 and norm > 1e-12:
                    Z[m, k] = sums[k] / norm
                else:
                    far = np.argsort(best, kind="stable")
                    far = far[~taken[far]][0]
                    taken[far] = True
                    Z[m, k] = x[far]
        if history is not None:
            history.append(kmeans_objective(blocks, Z))
    return Codebook(shape, Z)


def format_report(metrics: dict[str, float]) -> str:
    """Machine-readable ``key=value`` lines, one metric per line."""
    return "".join(f"{k}={v:.6f}\n" for k, v in metrics.items())


def format_table(metrics: dict[str, float]) -> str:
    width = max(len(k) for k in metrics) if metrics else 6
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  --------"]
    lines += [f"{k:<{width}}  {v:.6f}" for k, v in metrics.items()]
    return "\n".join(lines) + "\n"
