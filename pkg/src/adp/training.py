"""Training loop and evaluation protocol on the synthetic domains."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DatasetSplit, SampleSet, generate_dataset, pk_batch_sample
from .evaluation import RetrievalMetrics, evaluate_retrieval
from .losses import LossWeights
from .model import SGD, BranchedModel, ModelDims, build_branched_model, forward_all_branches, train_step
from .schedules import BranchScheduleSpec, MainScheduleSpec, main_lr_at, pmoc_lr_at

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, term: str):
        super().__init__(f"non-finite {term} loss at epoch {epoch}")
        self.epoch = epoch
        self.term = term


@dataclass
class ScheduleSet:
    """Learning rate per parameter group; branches fall back to ``main`` without PMoC."""

    main: MainScheduleSpec
    branches: list[BranchScheduleSpec] | None
    k: int

    def group_lrs(self, epoch: int) -> dict[str, float]:
        main = main_lr_at(self.main, epoch)
        lrs = {"main": main}
        for b in range(self.k):
            lrs[f"branch{b}"] = pmoc_lr_at(self.branches[b], epoch) if self.branches else main
        return lrs


def build_schedules(config: RunConfig) -> ScheduleSet:
    s = config.schedules
    main = MainScheduleSpec(
        eta=s.eta, T=s.T, warmup_epochs=s.warmup_epochs,
        warmup_start_frac=s.warmup_start_frac, floor_frac=s.floor_frac,
    )
    branches = None
    if config.toggles.enable_pmoc:
        branches = [BranchScheduleSpec(s.T, p, s.eta_min, s.gamma_pow, s.lambda_decay) for p in s.periods]
    return ScheduleSet(main=main, branches=branches, k=config.model.k)


def build_model(config: RunConfig) -> BranchedModel:
    m, d = config.model, config.data
    dims = ModelDims(d_in=d.d_in, d=m.d, num_tokens=d.tokens, num_classes=d.num_ids)
    return build_branched_model(
        m.trunk_blocks, m.clone_depth, m.k, dims, seed=m.seed, block_kind=m.block_kind,
        hidden_mult=m.hidden_mult, dymain_blocks=config.effective_dymain_blocks, eps=m.eps,
        fuse=m.fuse, adain_multiply=m.adain_multiply,
    )


@dataclass
class EpochRecord:
    epoch: int
    total: float
    ce: float
    triplet: float
    dcml: float
    lrs: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainResult:
    model: BranchedModel
    history: list[EpochRecord]
    split: DatasetSplit


def train(config: RunConfig, split: DatasetSplit | None = None) -> TrainResult:
    split = split if split is not None else generate_dataset(config.data.synthetic_spec(), config.data.heldout_domain)
    model = build_model(config)
    schedules = build_schedules(config)
    optimizer = SGD(model.parameter_groups(), momentum=config.schedules.momentum)
    weights = LossWeights(config.losses.w1, config.losses.w2, config.effective_w3)
    d = config.data
    rng = np.random.default_rng(d.seed + 1)
    steps = d.steps_per_epoch or max(1, len(split.train) // (d.P * d.K))

    history = []
    for epoch in range(config.schedules.T):
        sums = {"total": 0.0, "ce": 0.0, "triplet": 0.0, "dcml": 0.0}
        lrs = schedules.group_lrs(epoch)
        for _ in range(steps):
            tokens, labels, _ = pk_batch_sample(split.train, d.P, d.K, rng)
            rec = train_step(
                model, tokens, labels, epoch, optimizer, schedules, weights,
                config.losses.margin, config.losses.dcml_metric,
            )
            for term in sums:
                value = getattr(rec, term)
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, term)
                sums[term] += value
        means = {term: v / steps for term, v in sums.items()}
        history.append(EpochRecord(epoch=epoch, lrs=lrs, **means))
        logger.info("epoch %d total=%.4f ce=%.4f tri=%.4f dcml=%.4f", epoch, *means.values())
    return TrainResult(model=model, history=history, split=split)


def write_metrics_csv(path, history: list[EpochRecord], k: int) -> None:
    header = ["epoch", "total", "ce", "triplet", "dcml", "lr_main", *(f"lr_b{b + 1}" for b in range(k))]
    lines = [",".join(header)]
    for rec in history:
        losses = [f"{v:.10g}" for v in (rec.total, rec.ce, rec.triplet, rec.dcml)]
        # learning rates round-trip exactly so the log can be checked against the schedules
        lrs = [f"{v:.17g}" for v in (rec.lrs["main"], *(rec.lrs[f"branch{b}"] for b in range(k)))]
        lines.append(",".join([str(rec.epoch), *losses, *lrs]))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def embed_samples(model: BranchedModel, samples: SampleSet, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(samples), batch_size):
        out = forward_all_branches(model, samples.tokens[start : start + batch_size], mode="eval")
        chunks.append(out.fused_feature.data)
    return np.concatenate(chunks)


def _sample_index(samples: SampleSet) -> np.ndarray:
    """Position of each sample within its (id, domain) cell, in dataset order."""
    index = np.zeros(len(samples), dtype=int)
    seen: dict[tuple[int, int], int] = {}
    for i, key in enumerate(zip(samples.ids.tolist(), samples.domains.tolist())):
        index[i] = seen.get(key, 0)
        seen[key] = index[i] + 1
    return index


def heldout_metrics(samples: SampleSet, feats: np.ndarray) -> RetrievalMetrics:
    """Single unseen domain: first half of each identity queries the second half."""
    pos = _sample_index(samples)
    per_cell = np.bincount(pos).size
    query = pos < max(1, per_cell // 2)
    return evaluate_retrieval(feats[query], samples.ids[query], feats[~query], samples.ids[~query])


def heldin_metrics(samples: SampleSet, feats: np.ndarray) -> RetrievalMetrics:
    """Seen domains: the first test sample of each (id, domain) queries the rest.

    With two or more domains, same-id same-domain gallery items are excluded,
    so relevant matches are cross-domain.
    """
    pos = _sample_index(samples)
    query = pos == 0
    if len(np.unique(samples.domains)) >= 2:
        return evaluate_retrieval(
            feats[query], samples.ids[query], feats, samples.ids,
            samples.domains[query], samples.domains,
        )
    return evaluate_retrieval(feats[query], samples.ids[query], feats[~query], samples.ids[~query])


def evaluate_model(model: BranchedModel, split: DatasetSplit, perfect_features: bool = False) -> dict[str, RetrievalMetrics]:
    results = {}
    for name, samples, metric_fn in (
        ("heldout", split.heldout, heldout_metrics),
        ("heldin", split.heldin_test, heldin_metrics),
    ):
        if len(samples) == 0:
            continue
        if perfect_features:
            feats = np.eye(int(samples.ids.max()) + 1)[samples.ids]
        else:
            feats = embed_samples(model, samples)
        results[name] = metric_fn(samples, feats)
    return results
