"""Branch-alignment, identity classification and triplet losses."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 0.01

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("triplet margin must be >= 0")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    triplet: Tensor
    dcml: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "ce", "triplet", "dcml")}


def chebyshev_distance(x, y) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"extent mismatch: {x.shape} vs {y.shape}")
    return (x - y).abs().max()


def _chebyshev_rows(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().max(axis=1)


def _manhattan_rows(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().sum(axis=1)


def _euclidean_rows(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).sum(axis=1).sqrt()


# row-wise pair distances, (N, d) x (N, d) -> (N,)
PAIR_DISTANCES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "chebyshev": _chebyshev_rows,
    "manhattan": _manhattan_rows,
    "euclidean": _euclidean_rows,
}


def dcml_loss(branch_features: Sequence[Tensor], metric: str = "chebyshev") -> Tensor:
    """Mean pairwise branch distance, averaged over the batch.

    With the default Chebyshev metric only the largest component gap of each
    pair contributes (subgradient through the arg-max component).
    """
    k = len(branch_features)
    if k < 2:
        raise ValueError(f"alignment loss needs at least 2 branches, got {k}")
    shapes = {f.shape for f in branch_features}
    if len(shapes) != 1:
        raise ShapeError(f"branch feature shapes differ: {sorted(shapes)}")
    try:
        dist = PAIR_DISTANCES[metric]
    except KeyError:
        raise ValueError(f"unknown alignment metric {metric!r}") from None
    pairs = list(combinations(range(k), 2))
    total = dist(branch_features[pairs[0][0]], branch_features[pairs[0][1]])
    for i, j in pairs[1:]:
        total = total + dist(branch_features[i], branch_features[j])
    return total.mean() * (1.0 / len(pairs))


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if num_classes is not None and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy_from_logits(logits: Tensor, labels) -> Tensor:
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    shift = logits.data.max(axis=1, keepdims=True)  # constant, cancels analytically
    shifted = logits - shift
    log_norm = shifted.exp().sum(axis=1).log()
    picked = shifted[np.arange(n), labels]
    return (log_norm - picked).mean()


def cross_entropy_branch(features: Tensor, labels, classifier: Tensor) -> Tensor:
    """Batch-mean softmax cross-entropy of bias-free logits ``features @ W.T``."""
    if classifier.ndim != 2 or classifier.shape[1] != features.shape[-1]:
        raise ShapeError(f"classifier {classifier.shape} does not match features {features.shape}")
    return cross_entropy_from_logits(features @ classifier.T, labels)


def _hardest_indices(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    hardest_pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return hardest_pos, hardest_neg


def batch_hard_triplet(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Per anchor: hinge on (farthest positive - nearest negative + margin), anchor-mean."""
    n = features.shape[0]
    labels = _check_labels(labels, n)
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise ValueError("batch-hard mining needs at least two identities in the batch")
    if counts.min() < 2:
        raise ValueError(f"identity {values[counts.argmin()]} has a single instance in the batch")

    f = features.data
    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    pos, neg = _hardest_indices(dist, labels)

    def distance_to(idx):
        d = features - features[idx]
        return (d * d).sum(axis=1).sqrt()

    hinge = (distance_to(pos) - distance_to(neg) + margin).relu()
    return hinge.mean()


def total_loss(
    per_branch_features: Sequence[Tensor],
    per_branch_logits: Sequence[Tensor],
    labels,
    weights: LossWeights = LossWeights(),
    margin: float = 0.3,
    dcml_metric: str = "chebyshev",
) -> LossBreakdown:
    """``sum_b (w1 CE_b + w2 Tri_b) + w3 DCML``; the alignment term needs k >= 2."""
    k = len(per_branch_features)
    if k < 1 or len(per_branch_logits) != k:
        raise ValueError("need one logits tensor per branch and at least one branch")
    ce = cross_entropy_from_logits(per_branch_logits[0], labels)
    tri = batch_hard_triplet(per_branch_features[0], labels, margin)
    for b in range(1, k):
        ce = ce + cross_entropy_from_logits(per_branch_logits[b], labels)
        tri = tri + batch_hard_triplet(per_branch_features[b], labels, margin)
    total = weights.w1 * ce + weights.w2 * tri
    if k >= 2:
        align = dcml_loss(per_branch_features, dcml_metric)
        if weights.w3 != 0:
            total = total + weights.w3 * align
    else:
        align = Tensor(0.0)
    return LossBreakdown(total=total, ce=ce, triplet=tri, dcml=align)
