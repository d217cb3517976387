"""Branched backbone: shared trunk, cloned tail pathways, per-branch heads.

Input is a batch of token sequences ``(N, L, d_in)``. The embedding projects
tokens to width ``d``, prepends a learned class token and adds learned
positional encodings. The class-token output of each branch is that branch's
pooled feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .losses import LossBreakdown, LossWeights, total_loss
from .normalization import DEFAULT_EPS, DyMainParams, dymain_forward
from .tensor import ShapeError, Tensor, backward, broadcast_to, concat, no_grad

BLOCK_KINDS = ("residual_channel_mlp", "token_mix_lite")
FUSE_MODES = ("mean", "concat")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class BlockSpec:
    kind: str = "token_mix_lite"
    width: int = 16
    hidden_mult: int = 2
    has_dymain: bool = False


class Block:
    """Residual per-token MLP; ``token_mix_lite`` adds the token-mean context first."""

    def __init__(self, spec: BlockSpec, params: dict[str, Tensor], dymain: DyMainParams | None = None):
        if spec.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {spec.kind!r}")
        self.spec = spec
        self.params = params
        self.dymain = dymain

    @classmethod
    def init(cls, spec: BlockSpec, rng: np.random.Generator) -> "Block":
        d, h = spec.width, spec.width * spec.hidden_mult
        params = {
            "w1": _uniform(rng, (d, h), d),
            "b1": Tensor(np.zeros(h), requires_grad=True),
            "w2": _uniform(rng, (h, d), h),
            "b2": Tensor(np.zeros(d), requires_grad=True),
        }
        return cls(spec, params)

    def clone(self) -> "Block":
        params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        dymain = self.dymain.copy() if self.dymain is not None else None
        spec = BlockSpec(self.spec.kind, self.spec.width, self.spec.hidden_mult, self.spec.has_dymain)
        return Block(spec, params, dymain)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for k, v in self.params.items():
            yield f"{prefix}.{k}", v
        if self.dymain is not None:
            for k, v in self.dymain.named_parameters().items():
                yield f"{prefix}.dymain.{k}", v

    def __call__(self, x: Tensor, pairing: str = "max_deviance", adain_multiply: bool = False) -> Tensor:
        p = self.params
        h = x
        if self.spec.kind == "token_mix_lite":
            h = x + x.mean(axis=1, keepdims=True)
        h = (h @ p["w1"] + p["b1"]).relu() @ p["w2"] + p["b2"]
        out = x + h
        if self.dymain is not None:
            out = dymain_forward(out, self.dymain, adain_multiply=adain_multiply, pairing=pairing)
        return out


@dataclass
class Branch:
    blocks: list[Block]
    classifier: Tensor  # (C, d), no bias

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.block.{j}")
        yield f"{prefix}.classifier", self.classifier


@dataclass
class ModelDims:
    d_in: int
    d: int
    num_tokens: int  # L, excluding the class token
    num_classes: int


@dataclass
class BranchedModel:
    dims: ModelDims
    embed: dict[str, Tensor]
    trunk: list[Block]
    branches: list[Branch]
    fuse: str = "mean"
    adain_multiply: bool = False

    @property
    def k(self) -> int:
        return len(self.branches)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for k, v in self.embed.items():
            yield f"embed.{k}", v
        for i, block in enumerate(self.trunk):
            yield from block.named_parameters(f"trunk.{i}")
        for b, branch in enumerate(self.branches):
            yield from branch.named_parameters(f"branch.{b}")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        """``main`` = embedding + trunk; ``branch{b}`` = that branch's private parameters."""
        groups: dict[str, list[Tensor]] = {"main": []}
        for name, t in self.named_parameters():
            if name.startswith("branch."):
                groups.setdefault(f"branch{name.split('.')[1]}", []).append(t)
            else:
                groups["main"].append(t)
        return groups


def build_branched_model(
    trunk_blocks: int,
    clone_depth: int,
    k: int,
    dims: ModelDims,
    seed: int = 0,
    block_kind: str = "token_mix_lite",
    hidden_mult: int = 2,
    dymain_blocks: int | None = None,
    eps: float = DEFAULT_EPS,
    fuse: str = "mean",
    adain_multiply: bool = False,
) -> BranchedModel:
    """Build a backbone of ``trunk_blocks`` blocks and clone its last ``clone_depth`` into k branches.

    DyMAIN is attached to the last ``dymain_blocks`` blocks of every branch
    (all branch blocks by default; 0 disables it).
    """
    if clone_depth < 1:
        raise ValueError(f"clone_depth must be >= 1, got {clone_depth}")
    if clone_depth > trunk_blocks:
        raise ValueError(f"clone_depth={clone_depth} exceeds trunk_blocks={trunk_blocks}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if fuse not in FUSE_MODES:
        raise ValueError(f"unknown fuse mode {fuse!r}")
    dymain_blocks = clone_depth if dymain_blocks is None else dymain_blocks
    if not 0 <= dymain_blocks <= clone_depth:
        raise ValueError(f"dymain_blocks={dymain_blocks} must lie in [0, clone_depth={clone_depth}]")

    rng = np.random.default_rng(seed)
    d = dims.d
    embed = {
        "w": _uniform(rng, (dims.d_in, d), dims.d_in),
        "b": Tensor(np.zeros(d), requires_grad=True),
        "cls": _uniform(rng, (d,), d),
        "pos": _uniform(rng, (dims.num_tokens + 1, d), d),
    }
    spec = BlockSpec(kind=block_kind, width=d, hidden_mult=hidden_mult)
    backbone = [Block.init(spec, rng) for _ in range(trunk_blocks)]
    shared, tail = backbone[: trunk_blocks - clone_depth], backbone[trunk_blocks - clone_depth :]

    branches = []
    for _ in range(k):
        blocks = [blk.clone() for blk in tail]
        for j, blk in enumerate(blocks):
            if j >= clone_depth - dymain_blocks:
                blk.spec.has_dymain = True
                blk.dymain = DyMainParams.init(d, eps=eps)
        classifier = _uniform(rng, (dims.num_classes, d), d)
        branches.append(Branch(blocks=blocks, classifier=classifier))
    return BranchedModel(dims=dims, embed=embed, trunk=shared, branches=branches, fuse=fuse, adain_multiply=adain_multiply)


@dataclass
class ForwardOutput:
    per_branch_features: list[Tensor]
    per_branch_logits: list[Tensor]
    fused_feature: Tensor | None = None


def aggregate_features(per_branch_features: Sequence[Tensor], mode: str = "mean") -> Tensor:
    """Elementwise mean over branches (``mode="concat"`` concatenates instead)."""
    if len(per_branch_features) < 1:
        raise ValueError("need at least one branch feature")
    shapes = {f.shape for f in per_branch_features}
    if len(shapes) != 1:
        raise ShapeError(f"branch feature shapes differ: {sorted(shapes)}")
    if mode == "concat":
        return concat(per_branch_features, axis=1)
    if mode != "mean":
        raise ValueError(f"unknown fuse mode {mode!r}")
    total = per_branch_features[0]
    for f in per_branch_features[1:]:
        total = total + f
    return total * (1.0 / len(per_branch_features))


def embed_tokens(model: BranchedModel, tokens) -> Tensor:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    dims = model.dims
    if x.ndim != 3 or x.shape[1:] != (dims.num_tokens, dims.d_in):
        raise ShapeError(f"expected input (N, {dims.num_tokens}, {dims.d_in}), got {x.shape}")
    e = model.embed
    h = x @ e["w"] + e["b"]
    cls = broadcast_to(e["cls"].reshape(1, 1, dims.d), (x.shape[0], 1, dims.d))
    return concat([cls, h], axis=1) + e["pos"]


def forward_all_branches(model: BranchedModel, batch, mode: str = "train") -> ForwardOutput:
    """Run the trunk once and every branch on the shared activation.

    In ``eval`` mode nothing is recorded, DyMAIN styles each instance with its
    own statistics, and the fused feature is filled in.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval":
        with no_grad():
            return _forward(model, batch, pairing="self", fuse=True)
    return _forward(model, batch, pairing="max_deviance", fuse=False)


def _forward(model: BranchedModel, batch, pairing: str, fuse: bool) -> ForwardOutput:
    x = embed_tokens(model, batch)
    for block in model.trunk:
        x = block(x, pairing, model.adain_multiply)
    features, logits = [], []
    for branch in model.branches:
        h = x
        for block in branch.blocks:
            h = block(h, pairing, model.adain_multiply)
        pooled = h[:, 0, :]
        features.append(pooled)
        logits.append(pooled @ branch.classifier.T)
    fused = aggregate_features(features, model.fuse) if fuse else None
    return ForwardOutput(features, logits, fused)


class SGD:
    """SGD with momentum, ``v <- mu v + g; theta <- theta - lr v``, one lr per group."""

    def __init__(self, groups: dict[str, list[Tensor]], momentum: float = 0.9):
        self.groups = groups
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None

    def step(self, lrs: dict[str, float]) -> None:
        for name, params in self.groups.items():
            lr = lrs[name]
            for p in params:
                if p.grad is None:
                    continue
                v = self.velocity.get(id(p))
                v = p.grad.copy() if v is None else self.momentum * v + p.grad
                self.velocity[id(p)] = v
                p.data -= lr * v


@dataclass
class StepRecord:
    total: float
    ce: float
    triplet: float
    dcml: float
    lrs: dict[str, float] = field(default_factory=dict)


def train_step(
    model: BranchedModel,
    batch,
    labels,
    epoch: int,
    optimizer: SGD,
    schedules,
    weights: LossWeights = LossWeights(),
    margin: float = 0.3,
    dcml_metric: str = "chebyshev",
) -> StepRecord:
    """One forward/backward/update. ``schedules.group_lrs(epoch)`` maps group name to lr."""
    optimizer.zero_grad()
    out = forward_all_branches(model, batch, mode="train")
    losses: LossBreakdown = total_loss(
        out.per_branch_features, out.per_branch_logits, labels, weights, margin, dcml_metric
    )
    if losses.total.requires_grad:
        backward(losses.total)
    lrs = schedules.group_lrs(epoch)
    optimizer.step(lrs)
    values = losses.as_floats()
    return StepRecord(values["total"], values["ce"], values["triplet"], values["dcml"], lrs)
