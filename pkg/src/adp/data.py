"""Synthetic multi-domain identity data and PK batch sampling.

Each identity has a latent prototype. A sample is the prototype plus noise,
rendered to a token sequence ``(L, d_in)`` through a fixed random linear map,
then styled by its domain: a per-channel scale and shift drawn once per
domain. One domain is held out of training entirely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_ids: int = 20
    num_domains: int = 3
    samples_per_id_per_domain: int = 4
    heldin_test_per_id_per_domain: int = 2
    latent_dim: int = 8
    tokens: int = 6
    d_in: int = 8
    noise_sigma: float = 0.3
    style_strength: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_ids < 2:
            raise DataError("num_ids must be >= 2")
        if self.num_domains < 2:
            raise DataError("num_domains must be >= 2")
        if self.samples_per_id_per_domain < 2:
            raise DataError("samples_per_id_per_domain must be >= 2")
        if self.heldin_test_per_id_per_domain < 0:
            raise DataError("heldin_test_per_id_per_domain must be >= 0")
        for name in ("latent_dim", "tokens", "d_in"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.style_strength < 0:
            raise DataError("noise_sigma and style_strength must be >= 0")


@dataclass
class LabeledSample:
    tokens: np.ndarray  # (L, d_in)
    id_label: int
    domain_label: int


@dataclass
class SampleSet:
    tokens: np.ndarray  # (n, L, d_in)
    ids: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.tokens[i], int(self.ids[i]), int(self.domains[i]))

    def subset(self, mask_or_idx) -> "SampleSet":
        return SampleSet(self.tokens[mask_or_idx], self.ids[mask_or_idx], self.domains[mask_or_idx])


@dataclass
class DatasetSplit:
    train: SampleSet
    heldin_test: SampleSet  # unseen samples from the training domains
    heldout: SampleSet  # every sample of the withheld domain
    heldout_domain: int


def _render(spec: SyntheticSpec, rng: np.random.Generator):
    prototypes = rng.standard_normal((spec.num_ids, spec.latent_dim))
    render = rng.standard_normal((spec.latent_dim, spec.tokens * spec.d_in)) / np.sqrt(spec.latent_dim)
    scales = np.exp(spec.style_strength * rng.standard_normal((spec.num_domains, spec.d_in)))
    shifts = spec.style_strength * rng.standard_normal((spec.num_domains, spec.d_in))
    return prototypes, render, scales, shifts


def generate_dataset(spec: SyntheticSpec, heldout_domain: int = -1) -> DatasetSplit:
    spec.validate()
    if not -spec.num_domains <= heldout_domain < spec.num_domains:
        raise DataError(f"heldout_domain {heldout_domain} out of range for {spec.num_domains} domains")
    heldout_domain %= spec.num_domains
    rng = np.random.default_rng(spec.seed)
    prototypes, render, scales, shifts = _render(spec, rng)

    per_cell = spec.samples_per_id_per_domain + spec.heldin_test_per_id_per_domain
    tokens, ids, domains, is_test = [], [], [], []
    for dom in range(spec.num_domains):
        for pid in range(spec.num_ids):
            count = spec.samples_per_id_per_domain if dom == heldout_domain else per_cell
            latent = prototypes[pid] + spec.noise_sigma * rng.standard_normal((count, spec.latent_dim))
            content = (latent @ render).reshape(count, spec.tokens, spec.d_in)
            tokens.append(content * scales[dom] + shifts[dom])
            ids.extend([pid] * count)
            domains.extend([dom] * count)
            is_test.extend([s >= spec.samples_per_id_per_domain for s in range(count)])
    full = SampleSet(np.concatenate(tokens), np.asarray(ids), np.asarray(domains))
    is_test = np.asarray(is_test)
    out_mask = full.domains == heldout_domain
    return DatasetSplit(
        train=full.subset(~out_mask & ~is_test),
        heldin_test=full.subset(~out_mask & is_test),
        heldout=full.subset(out_mask),
        heldout_domain=heldout_domain,
    )


def pk_batch_sample(samples: SampleSet, P: int, K: int, rng: np.random.Generator):
    """Draw P identities and K distinct samples of each. Returns ``(tokens, labels, indices)``."""
    if P < 2 or K < 2:
        raise DataError(f"PK sampling needs P >= 2 and K >= 2, got P={P}, K={K}")
    labels, counts = np.unique(samples.ids, return_counts=True)
    eligible = labels[counts >= K]
    if len(eligible) < P:
        raise DataError(f"only {len(eligible)} identities have >= {K} samples; need P={P}")
    chosen = rng.choice(eligible, size=P, replace=False)
    indices = np.concatenate(
        [rng.choice(np.flatnonzero(samples.ids == pid), size=K, replace=False) for pid in chosen]
    )
    return samples.tokens[indices], samples.ids[indices], indices


# -- dump format ---------------------------------------------------------------
# JSON header line, then per record: int64 id, int64 domain, L*d_in float64 (all little-endian)

_MAGIC = "ADPDATA1"


def write_dataset(path, spec: SyntheticSpec, samples: SampleSet) -> None:
    n, L, d_in = samples.tokens.shape
    header = json.dumps({"magic": _MAGIC, "spec": asdict(spec), "count": n, "tokens": L, "d_in": d_in})
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        for i in range(n):
            fh.write(struct.pack("<qq", int(samples.ids[i]), int(samples.domains[i])))
            fh.write(samples.tokens[i].astype("<f8").tobytes())


def read_dataset(path) -> tuple[SyntheticSpec, SampleSet]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    if header.get("magic") != _MAGIC:
        raise DataError(f"{path}: not a dataset dump")
    n, L, d_in = header["count"], header["tokens"], header["d_in"]
    rec = np.dtype([("id", "<i8"), ("domain", "<i8"), ("x", "<f8", (L, d_in))])
    records = np.frombuffer(raw, dtype=rec, count=n, offset=cut + 1)
    samples = SampleSet(records["x"].astype(np.float64), records["id"].astype(np.int64), records["domain"].astype(np.int64))
    return SyntheticSpec(**header["spec"]), samples
