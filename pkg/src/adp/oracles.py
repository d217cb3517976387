"""Brute-force reference computations in plain Python loops.

These share no code with the tensor engine and are used to cross-check it.
"""

from __future__ import annotations

import math
from itertools import combinations


def match_oracle(mu) -> list[int]:
    rows = [list(map(float, r)) for r in mu]
    n = len(rows)
    if n == 1:
        return [0]
    match = []
    for i in range(n):
        best_j, best = -1, -1.0
        for j in range(n):
            if j == i:
                continue
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])))
            if d > best:
                best_j, best = j, d
        match.append(best_j)
    return match


def dcml_oracle(branch_features, metric: str = "chebyshev") -> float:
    """branch_features: k nested lists of shape (N, d)."""
    k = len(branch_features)
    n = len(branch_features[0])
    pairs = list(combinations(range(k), 2))
    total = 0.0
    for s in range(n):
        for i, j in pairs:
            gaps = [abs(a - b) for a, b in zip(branch_features[i][s], branch_features[j][s])]
            if metric == "chebyshev":
                total += max(gaps)
            elif metric == "manhattan":
                total += sum(gaps)
            else:
                total += math.sqrt(sum(x * x for x in gaps))
    return total / (n * len(pairs))


def triplet_oracle(features, labels, margin: float) -> float:
    """Exhaustive search for each anchor's farthest positive and nearest negative."""
    rows = [list(map(float, r)) for r in features]
    n = len(rows)
    total = 0.0
    for a in range(n):
        d_ap, d_an = -math.inf, math.inf
        for j in range(n):
            d = math.sqrt(sum((x - y) ** 2 for x, y in zip(rows[a], rows[j])))
            if labels[j] == labels[a]:
                d_ap = max(d_ap, d)
            else:
                d_an = min(d_an, d)
        total += max(d_ap - d_an + margin, 0.0)
    return total / n


def cross_entropy_oracle(logits, labels) -> float:
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)
