"""Retrieval metrics: mAP and Rank-1 over a query/gallery split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalMetrics:
    mAP: float
    rank1: float
    per_query_ap: list[float] = field(default_factory=list)


def average_precision_oracle(ranked_relevance) -> float:
    """Plain AP sum by explicit loop: mean of precision@k over the relevant ranks."""
    hits = 0
    total = 0.0
    for k, rel in enumerate(ranked_relevance, start=1):
        if rel:
            hits += 1
            total += hits / k
    if hits == 0:
        raise EvaluationError("average precision is undefined without a relevant item")
    return total / hits


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def evaluate_retrieval(
    query_feats,
    query_labels,
    gallery_feats,
    gallery_labels,
    query_domains=None,
    gallery_domains=None,
) -> RetrievalMetrics:
    """Rank the gallery by Euclidean distance on L2-normalized features.

    When domain labels are given, gallery items sharing both identity and
    domain with the query are dropped before ranking (camera-style exclusion).
    Distance ties keep gallery order.
    """
    q = _l2_normalize(np.asarray(query_feats, dtype=np.float64))
    g = _l2_normalize(np.asarray(gallery_feats, dtype=np.float64))
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    exclude = (query_domains is not None) and (gallery_domains is not None)
    if exclude:
        qd = np.asarray(query_domains)
        gd = np.asarray(gallery_domains)

    dist = np.sqrt(np.maximum(
        (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T, 0.0
    ))
    aps, top1 = [], []
    for i in range(len(q)):
        order = np.argsort(dist[i], kind="stable")
        if exclude:
            keep = ~((gl[order] == ql[i]) & (gd[order] == qd[i]))
            order = order[keep]
        rel = gl[order] == ql[i]
        n_rel = int(rel.sum())
        if n_rel == 0:
            raise EvaluationError(f"query {i} has no valid relevant gallery item")
        ranks = np.flatnonzero(rel) + 1
        aps.append(float(np.mean(np.arange(1, n_rel + 1) / ranks)))
        top1.append(bool(rel[0]))
    return RetrievalMetrics(mAP=float(np.mean(aps)), rank1=float(np.mean(top1)), per_query_ap=aps)
