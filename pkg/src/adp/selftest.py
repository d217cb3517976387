"""Invariant suite behind ``adp selftest``.

Each check returns ``(passed, detail)``. Random instances are seeded and
resampled until every discrete selection (pairing arg-max, Chebyshev arg-max,
hardest positive/negative, hinge and ReLU kinks) is at least ``TIE_GAP`` away
from switching, so finite differences see a smooth function.
"""

from __future__ import annotations

import math
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import losses
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import average_precision_oracle, evaluate_retrieval
from .losses import LossWeights, batch_hard_triplet, cross_entropy_branch, dcml_loss, total_loss
from .model import ModelDims, build_branched_model, embed_tokens, forward_all_branches
from .normalization import (
    DyMainParams,
    channel_stats,
    dymain_forward,
    instance_norm,
    main_normalize,
    max_deviance_match,
)
from .oracles import dcml_oracle, match_oracle, triplet_oracle
from .schedules import BranchScheduleSpec, MainScheduleSpec, derive_branch_schedule, main_lr_at, pmoc_lr_at
from .tensor import Tensor, backward, finite_difference_gradient, gradient_relative_error, no_grad

TIE_GAP = 1e-3
GRAD_TOL = 1e-4
PUBLISHED_PERIODS = [120, 60, 30, 24, 20, 15, 12]


# -- tie margins ------------------------------------------------------------------


def _top2_gap(values: np.ndarray, axis: int = -1) -> float:
    if values.shape[axis] < 2:
        return math.inf
    part = -np.sort(-values, axis=axis)
    return float((np.take(part, 0, axis=axis) - np.take(part, 1, axis=axis)).min())


def pairing_margin(x: np.ndarray) -> float:
    mu = x.mean(axis=1)
    if len(mu) < 3:
        return math.inf
    dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
    np.fill_diagonal(dist, -np.inf)
    return _top2_gap(dist)


def chebyshev_margin(features: list[np.ndarray]) -> float:
    gaps = [
        _top2_gap(np.abs(features[i] - features[j]))
        for i in range(len(features))
        for j in range(i + 1, len(features))
    ]
    return min(gaps) if gaps else math.inf


def triplet_margin(f: np.ndarray, labels: np.ndarray, margin: float) -> float:
    dist = np.linalg.norm(f[:, None] - f[None], axis=-1)
    same = labels[:, None] == labels[None]
    worst = math.inf
    for a in range(len(f)):
        pos = np.sort(dist[a][same[a]])[::-1]
        neg = np.sort(dist[a][~same[a]])
        worst = min(worst, pos[0] - pos[1] if len(pos) > 1 else math.inf)
        worst = min(worst, neg[1] - neg[0] if len(neg) > 1 else math.inf)
        worst = min(worst, abs(pos[0] - neg[0] + margin))
    return worst


# -- gradient check instances ----------------------------------------------------


@dataclass
class GradInstance:
    name: str
    params: list[Tensor]
    loss_fn: Callable[[], Tensor]


def check_gradients(inst: GradInstance, h: float = 1e-5) -> float:
    """Largest per-tensor relative error between backward() and central differences."""
    for p in inst.params:
        p.grad = None
    backward(inst.loss_fn())
    worst = 0.0
    for p in inst.params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        numeric = finite_difference_gradient(lambda _: inst.loss_fn(), p, h)
        worst = max(worst, gradient_relative_error(analytic, numeric.data))
    return worst


def _pk_labels(rng: np.random.Generator, n_max: int = 6) -> np.ndarray:
    P = int(rng.integers(2, n_max // 2 + 1))
    return np.repeat(np.arange(P), 2)[: 2 * P]


def _random_dymain(rng: np.random.Generator, d: int) -> DyMainParams:
    return DyMainParams(
        gamma=Tensor(rng.uniform(0.5, 1.5, d), requires_grad=True),
        beta=Tensor(rng.normal(0, 0.5, d), requires_grad=True),
        alpha=Tensor(rng.uniform(0.0, 1.0, d), requires_grad=True),
    )


def dymain_instance(seed: int) -> GradInstance:
    rng = np.random.default_rng(seed)
    while True:
        n, L, d = int(rng.integers(3, 7)), int(rng.integers(2, 5)), int(rng.integers(2, 9))
        x = Tensor(rng.normal(size=(n, L, d)), requires_grad=True)
        p1, p2 = _random_dymain(rng, d), _random_dymain(rng, d)
        with_grad = [x, p1.gamma, p1.beta, p1.alpha, p2.gamma, p2.beta, p2.alpha]
        f1 = dymain_forward(x, p1).mean(axis=1)
        f2 = dymain_forward(x, p2).mean(axis=1)
        if pairing_margin(x.data) > TIE_GAP and chebyshev_margin([f1.data, f2.data]) > TIE_GAP:
            break

    def loss():
        o1 = dymain_forward(x, p1)
        o2 = dymain_forward(x, p2)
        smooth = (o1 * o1).mean() * 0.1
        return dcml_loss([o1.mean(axis=1), o2.mean(axis=1)]) + smooth

    return GradInstance("dymain", with_grad, loss)


def dcml_instance(seed: int) -> GradInstance:
    rng = np.random.default_rng(seed)
    while True:
        k, n, d = int(rng.integers(2, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 9))
        feats = [Tensor(rng.normal(size=(n, d)), requires_grad=True) for _ in range(k)]
        if chebyshev_margin([f.data for f in feats]) > TIE_GAP:
            break
    return GradInstance("dcml", feats, lambda: dcml_loss(feats))


def ce_instance(seed: int) -> GradInstance:
    rng = np.random.default_rng(seed)
    n, d, c = int(rng.integers(1, 7)), int(rng.integers(1, 9)), int(rng.integers(2, 6))
    f = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    w = Tensor(rng.normal(size=(c, d)), requires_grad=True)
    labels = rng.integers(0, c, size=n)
    return GradInstance("cross_entropy", [f, w], lambda: cross_entropy_branch(f, labels, w))


def triplet_instance(seed: int) -> GradInstance:
    rng = np.random.default_rng(seed)
    while True:
        labels = _pk_labels(rng)
        d = int(rng.integers(1, 9))
        f = Tensor(rng.normal(size=(len(labels), d)), requires_grad=True)
        if triplet_margin(f.data, labels, 0.3) > TIE_GAP:
            break
    return GradInstance("triplet", [f], lambda: batch_hard_triplet(f, labels, 0.3))


def total_instance(seed: int) -> GradInstance:
    rng = np.random.default_rng(seed)
    while True:
        labels = _pk_labels(rng)
        k, d, c = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(labels.max()) + 1
        feats = [Tensor(rng.normal(size=(len(labels), d)), requires_grad=True) for _ in range(k)]
        cls = [Tensor(rng.normal(size=(c, d)), requires_grad=True) for _ in range(k)]
        ok = chebyshev_margin([f.data for f in feats]) > TIE_GAP
        ok = ok and all(triplet_margin(f.data, labels, 0.3) > TIE_GAP for f in feats)
        if ok:
            break
    weights = LossWeights(1.0, 1.0, 0.5)  # w3 raised so the alignment term is visible

    def loss():
        logits = [f @ w.T for f, w in zip(feats, cls)]
        return total_loss(feats, logits, labels, weights).total

    return GradInstance("total", feats + cls, loss)


def model_instance(seed: int) -> GradInstance:
    """Tiny end-to-end model: trunk 2 blocks, clone depth 1, k=2, d=4, L=3, N=4, C=3."""
    rng = np.random.default_rng(seed)
    dims = ModelDims(d_in=3, d=4, num_tokens=3, num_classes=3)
    labels = np.array([0, 0, 1, 1])
    while True:
        model = build_branched_model(2, 1, 2, dims, seed=int(rng.integers(1 << 31)))
        # break clone symmetry so branch features differ
        for name, t in model.named_parameters():
            if name.startswith("branch."):
                t.data = t.data + rng.normal(0, 0.1, size=t.shape)
        tokens = rng.normal(size=(4, 3, 3))
        if _model_tie_free(model, tokens, labels):
            break
    params = [t for _, t in model.named_parameters()]

    def loss():
        out = forward_all_branches(model, tokens, mode="train")
        return total_loss(out.per_branch_features, out.per_branch_logits, labels, LossWeights(1.0, 1.0, 0.5)).total

    return GradInstance("model", params, loss)


def _model_tie_free(model, tokens, labels) -> bool:
    """Replay the forward pass and collect every kink margin."""
    margins: list[float] = []

    def run_block(block, x: Tensor) -> Tensor:
        p = block.params
        h = x + x.mean(axis=1, keepdims=True) if block.spec.kind == "token_mix_lite" else x
        pre = h @ p["w1"] + p["b1"]
        margins.append(float(np.abs(pre.data).min()))
        out = x + (pre.relu() @ p["w2"] + p["b2"])
        if block.dymain is not None:
            margins.append(pairing_margin(out.data))
            out = dymain_forward(out, block.dymain)
        return out

    with no_grad():
        x = embed_tokens(model, tokens)
        for block in model.trunk:
            x = run_block(block, x)
        feats = []
        for branch in model.branches:
            h = x
            for block in branch.blocks:
                h = run_block(block, h)
            feats.append(h.data[:, 0, :])
    margins.append(chebyshev_margin(feats))
    margins.extend(triplet_margin(f, labels, 0.3) for f in feats)
    return min(margins) > TIE_GAP


INSTANCE_BUILDERS: dict[str, Callable[[int], GradInstance]] = {
    "dymain": dymain_instance,
    "dcml": dcml_instance,
    "cross_entropy": ce_instance,
    "triplet": triplet_instance,
    "total": total_instance,
}


# -- checks ------------------------------------------------------------------------


def check_schedule_reproduction():
    derived = [derive_branch_schedule(BranchScheduleSpec(120, p, 0.004, 1.806, 0.5)) for p in PUBLISHED_PERIODS]
    cycles = [d.c for d in derived]
    peak = max(d.eta_base for d in derived)
    ok = cycles == [1, 2, 4, 5, 6, 8, 10] and abs(peak - 0.2559) <= 1e-3
    return ok, f"cycles={cycles} max_base={peak:.6f}"


def check_schedule_closed_forms():
    spec = BranchScheduleSpec(120, 12, 0.004, 1.806, 0.5)
    base = derive_branch_schedule(spec).eta_base
    main = MainScheduleSpec(eta=0.004, T=120, warmup_epochs=10)
    errs = [
        abs(pmoc_lr_at(spec, 0) - base),
        abs(pmoc_lr_at(spec, 12) - base * 0.5 ** 0.1),
        abs(pmoc_lr_at(spec, 6) - base / 2),
        abs(main_lr_at(main, 0) - 0.01 * 0.004),
        abs(main_lr_at(main, 10) - 0.004),
        abs(main_lr_at(main, 65) - 2.004e-3),
    ]
    for p in PUBLISHED_PERIODS:
        s = BranchScheduleSpec(120, p, 0.004, 1.806, 0.5)
        dd = derive_branch_schedule(s)
        errs.append(abs(dd.per_cycle_decay ** dd.c - 0.5))
    return max(errs) < 1e-12, f"max abs error {max(errs):.3g}"


def _grad_check(kind: str, count: int = 20):
    builder = INSTANCE_BUILDERS.get(kind, model_instance if kind == "model" else None)
    worst = max(check_gradients(builder(seed)) for seed in range(count))
    return worst < GRAD_TOL, f"max relative error {worst:.3g} over {count} instances"


def check_dymain_reductions():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n, L, d = rng.integers(1, 7), rng.integers(2, 5), rng.integers(1, 9)
        x = Tensor(rng.normal(size=(n, L, d)))
        p = DyMainParams.init(int(d))
        p.alpha.data[:] = 0.0
        worst = max(worst, np.abs(dymain_forward(x, p).data - instance_norm(x).data).max())
        q = _random_dymain(rng, int(d))
        q.alpha.data[:] = 1.0
        stats = channel_stats(x)
        expected = main_normalize(x, stats, max_deviance_match(stats.mu), q).data
        worst = max(worst, np.abs(dymain_forward(x, q).data - expected).max())
        r = _random_dymain(rng, int(d))
        a = r.alpha.data.copy()
        mixed = dymain_forward(x, r).data
        r.alpha.data[:] = 1.0
        hi = dymain_forward(x, r).data
        r.alpha.data[:] = 0.0
        lo = dymain_forward(x, r).data
        worst = max(worst, np.abs(mixed - (a * hi + (1 - a) * lo)).max())
    return worst <= 1e-12, f"max deviation {worst:.3g}"


def check_match_oracle(count: int = 100):
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(count):
        mu = rng.normal(size=(rng.integers(1, 17), rng.integers(1, 9)))
        bad += max_deviance_match(mu) != match_oracle(mu)
    return bad == 0, f"{bad}/{count} mismatches"


def check_dcml_oracle(count: int = 100):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(count):
        k, n, d = rng.integers(2, 6), rng.integers(1, 9), rng.integers(1, 17)
        feats = [rng.normal(size=(n, d)) for _ in range(k)]
        got = dcml_loss([Tensor(f) for f in feats]).item()
        worst = max(worst, abs(got - dcml_oracle([f.tolist() for f in feats])))
    return worst <= 1e-12, f"max deviation {worst:.3g}"


def check_triplet_oracle(count: int = 200):
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(count):
        P = int(rng.integers(2, 5))
        K = int(rng.integers(2, 8 // P + 1))
        labels = np.repeat(np.arange(P), K)
        f = rng.normal(size=(len(labels), int(rng.integers(1, 6))))
        got = batch_hard_triplet(Tensor(f), labels, 0.3).item()
        worst = max(worst, abs(got - triplet_oracle(f, labels.tolist(), 0.3)))
    return worst <= 1e-12, f"max deviation {worst:.3g}"


def check_ap_oracle(count: int = 200):
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(count):
        ng = int(rng.integers(2, 21))
        g_labels = rng.integers(0, 3, size=ng)
        q_labels = rng.choice(np.unique(g_labels), size=int(rng.integers(1, 6)))
        qf, gf = rng.normal(size=(len(q_labels), 4)), rng.normal(size=(ng, 4))
        got = evaluate_retrieval(qf, q_labels, gf, g_labels).mAP
        qn = qf / np.linalg.norm(qf, axis=1, keepdims=True)
        gn = gf / np.linalg.norm(gf, axis=1, keepdims=True)
        aps = []
        for i in range(len(q_labels)):
            order = sorted(range(ng), key=lambda j: (float(np.sum((qn[i] - gn[j]) ** 2)), j))
            aps.append(average_precision_oracle([g_labels[j] == q_labels[i] for j in order]))
        worst = max(worst, abs(got - sum(aps) / len(aps)))
    return worst <= 1e-12, f"max deviation {worst:.3g}"


def check_clone_symmetry():
    dims = ModelDims(d_in=5, d=8, num_tokens=4, num_classes=4)
    model = build_branched_model(4, 2, 3, dims, seed=3)
    tokens = np.random.default_rng(5).normal(size=(6, 4, 5))
    out = forward_all_branches(model, tokens, mode="train")
    first = out.per_branch_features[0].data
    equal = all(np.array_equal(first, f.data) for f in out.per_branch_features[1:])
    align = dcml_loss(out.per_branch_features).item()
    return equal and align == 0.0, f"bit-equal={equal} dcml={align}"


def check_checkpoint_roundtrip():
    dims = ModelDims(d_in=5, d=8, num_tokens=4, num_classes=4)
    model = build_branched_model(3, 2, 2, dims, seed=9)
    state = model.state_dict()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
    same = loaded.keys() == state.keys() and all(
        loaded[k].tobytes() == state[k].tobytes() for k in state
    )
    return same, f"{len(state)} tensors"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "schedule_reproduction": check_schedule_reproduction,
    "schedule_closed_forms": check_schedule_closed_forms,
    "grad_dymain": lambda: _grad_check("dymain"),
    "grad_dcml": lambda: _grad_check("dcml"),
    "grad_cross_entropy": lambda: _grad_check("cross_entropy"),
    "grad_triplet": lambda: _grad_check("triplet"),
    "grad_total": lambda: _grad_check("total"),
    "grad_model": lambda: _grad_check("model"),
    "dymain_reductions": check_dymain_reductions,
    "match_oracle": check_match_oracle,
    "dcml_oracle": check_dcml_oracle,
    "triplet_oracle": check_triplet_oracle,
    "ap_oracle": check_ap_oracle,
    "clone_symmetry": check_clone_symmetry,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
}


def _corrupt_chebyshev(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean(axis=1)


@contextmanager
def injected_fault(fault: str | None) -> Iterator[None]:
    """Negative-control hook: temporarily swap a component for a broken one."""
    if fault is None:
        yield
        return
    if fault != "chebyshev":
        raise ValueError(f"unknown fault {fault!r}")
    original = losses.PAIR_DISTANCES["chebyshev"]
    losses.PAIR_DISTANCES["chebyshev"] = _corrupt_chebyshev
    try:
        yield
    finally:
        losses.PAIR_DISTANCES["chebyshev"] = original


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_selftest(fault: str | None = None, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    with injected_fault(fault):
        for name, check in CHECKS.items():
            if only and name not in only:
                continue
            start = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as exc:  # a crashing check is a failing check
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
