"""Instance normalization, max-deviance style mixing (MAIN) and the DyMAIN blend.

All functions take token feature maps shaped ``(N, L, d)``; statistics are taken
over the location axis ``L`` per instance and channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, reduce_stats

DEFAULT_EPS = 1e-5


@dataclass
class ChannelStats:
    mu: Tensor  # (N, d)
    sigma: Tensor  # (N, d), sqrt(var + eps)
    eps: float = DEFAULT_EPS


@dataclass
class DyMainParams:
    gamma: Tensor
    beta: Tensor
    alpha: Tensor
    eps: float = DEFAULT_EPS

    @classmethod
    def init(cls, d: int, eps: float = DEFAULT_EPS, alpha: float = 0.5) -> "DyMainParams":
        return cls(
            gamma=Tensor(np.ones(d), requires_grad=True),
            beta=Tensor(np.zeros(d), requires_grad=True),
            alpha=Tensor(np.full(d, alpha), requires_grad=True),
            eps=eps,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta, "alpha": self.alpha}

    def copy(self) -> "DyMainParams":
        return DyMainParams(
            gamma=Tensor(self.gamma.data, requires_grad=True),
            beta=Tensor(self.beta.data, requires_grad=True),
            alpha=Tensor(self.alpha.data, requires_grad=True),
            eps=self.eps,
        )


def channel_stats(x: Tensor, eps: float = DEFAULT_EPS) -> ChannelStats:
    mu, var = reduce_stats(x)
    return ChannelStats(mu=mu, sigma=(var + eps).sqrt(), eps=eps)


def _standardize(x: Tensor, stats: ChannelStats) -> Tensor:
    n, _, d = x.shape
    return (x - stats.mu.reshape(n, 1, d)) / stats.sigma.reshape(n, 1, d)


def instance_norm(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """``(x - mu) / sqrt(var + eps)`` per instance and channel (no affine)."""
    return _standardize(x, channel_stats(x, eps))


def max_deviance_match(mu) -> list[int]:
    """Pair each instance with the batchmate whose channel means are farthest away.

    Euclidean distance; ties go to the lowest index. A batch of one pairs with itself.
    """
    m = mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=np.float64)
    n = m.shape[0]
    if n == 1:
        return [0]
    diff = m[:, None, :] - m[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist2, -np.inf)
    return [int(j) for j in np.argmax(dist2, axis=1)]


def main_normalize(
    x: Tensor,
    stats: ChannelStats,
    match: Sequence[int],
    params: DyMainParams,
    adain_multiply: bool = False,
) -> Tensor:
    """Re-style each instance with the statistics of its matched partner.

    By default the normalized content is *divided* by the partner's sigma;
    ``adain_multiply`` switches to the classical AdaIN product.
    """
    n, _, d = x.shape
    idx = np.asarray(match, dtype=np.intp)
    if idx.shape != (n,):
        raise ValueError(f"match must have {n} entries, got {len(idx)}")
    x_bar = _standardize(x, stats)
    style_mu = stats.mu[idx].reshape(n, 1, d)
    style_sigma = stats.sigma[idx].reshape(n, 1, d)
    styled = x_bar * style_sigma if adain_multiply else x_bar / style_sigma
    return (styled + style_mu) * params.gamma + params.beta


def dymain_forward(
    x: Tensor,
    params: DyMainParams,
    adain_multiply: bool = False,
    pairing: str = "max_deviance",
) -> Tensor:
    """Per-channel blend ``alpha * MAIN(x) + (1 - alpha) * (IN(x) * gamma + beta)``.

    ``pairing="self"`` styles each instance with its own statistics, which makes
    the output independent of the rest of the batch (used at evaluation time).
    """
    stats = channel_stats(x, params.eps)
    if pairing == "max_deviance":
        match = max_deviance_match(stats.mu)
    elif pairing == "self":
        match = list(range(x.shape[0]))
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    mixed = main_normalize(x, stats, match, params, adain_multiply)
    plain = _standardize(x, stats) * params.gamma + params.beta
    return params.alpha * mixed + (1.0 - params.alpha) * plain
