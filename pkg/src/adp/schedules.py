"""Per-epoch learning-rate schedules.

Branch schedules are phased mixtures of cosines: a branch with period ``p``
runs ``c = T // p`` cosine cycles from a base rate ``c**gamma_pow * eta_min``
down towards zero, multiplying the peak by ``lambda_decay ** (1 / c)`` after
each cycle so the last peak ends up ``lambda_decay`` times the first.

The shared/main schedule warms up linearly and then follows a single cosine
down to a floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class BranchScheduleSpec:
    T: int
    p: int
    eta_min: float
    gamma_pow: float
    lambda_decay: float = 0.5

    def validate(self) -> None:
        if not 1 <= self.p <= self.T:
            raise ScheduleError(f"period p={self.p} must satisfy 1 <= p <= T={self.T}")
        if not self.eta_min > 0:
            raise ScheduleError(f"eta_min must be positive, got {self.eta_min}")
        if not 0 < self.lambda_decay <= 1:
            raise ScheduleError(f"lambda_decay must lie in (0, 1], got {self.lambda_decay}")
        if self.gamma_pow < 0:
            raise ScheduleError(f"gamma_pow must be >= 0, got {self.gamma_pow}")


@dataclass(frozen=True)
class BranchScheduleDerived:
    c: int
    eta_base: float
    per_cycle_decay: float


@dataclass(frozen=True)
class MainScheduleSpec:
    eta: float
    T: int
    warmup_epochs: int = 10
    warmup_start_frac: float = 0.01
    floor_frac: float = 0.002

    def validate(self) -> None:
        if not self.eta > 0:
            raise ScheduleError(f"eta must be positive, got {self.eta}")
        if not 0 < self.warmup_start_frac < 1:
            raise ScheduleError(f"warmup_start_frac must lie in (0, 1), got {self.warmup_start_frac}")
        if not 0 < self.floor_frac < 1:
            raise ScheduleError(f"floor_frac must lie in (0, 1), got {self.floor_frac}")
        if not 0 <= self.warmup_epochs < self.T:
            raise ScheduleError(f"warmup_epochs={self.warmup_epochs} must be < T={self.T}")


def derive_branch_schedule(spec: BranchScheduleSpec) -> BranchScheduleDerived:
    spec.validate()
    c = spec.T // spec.p
    return BranchScheduleDerived(
        c=c,
        eta_base=c**spec.gamma_pow * spec.eta_min,
        per_cycle_decay=spec.lambda_decay ** (1.0 / c),
    )


def _check_epoch(epoch: int, T: int) -> None:
    if not 0 <= epoch < T:
        raise ScheduleError(f"epoch {epoch} outside [0, {T})")


def pmoc_lr_at(spec: BranchScheduleSpec, epoch: int) -> float:
    derived = derive_branch_schedule(spec)
    _check_epoch(epoch, spec.T)
    # a trailing partial cycle (T % p != 0) keeps the same formula, truncated at T
    q, t = divmod(epoch, spec.p)
    cosine = (1.0 + math.cos(math.pi * t / spec.p)) / 2.0
    return derived.eta_base * derived.per_cycle_decay**q * cosine


def main_lr_at(spec: MainScheduleSpec, epoch: int) -> float:
    spec.validate()
    _check_epoch(epoch, spec.T)
    w = spec.warmup_epochs
    if epoch < w:
        start = spec.warmup_start_frac
        return spec.eta * (start + (1.0 - start) * epoch / w)
    floor = spec.floor_frac * spec.eta
    cosine = (1.0 + math.cos(math.pi * (epoch - w) / (spec.T - w))) / 2.0
    return floor + (spec.eta - floor) * cosine


def dump_schedules(
    branch_specs: Sequence[BranchScheduleSpec],
    main_spec: MainScheduleSpec,
    T: int | None = None,
) -> list[list[float]]:
    """Rows ``[epoch, main, branch1, ..., branchK]`` for every epoch."""
    T = main_spec.T if T is None else T
    mismatched = [s.T for s in branch_specs if s.T != T]
    if main_spec.T != T or mismatched:
        raise ScheduleError(f"all schedules must share T={T}; got main T={main_spec.T}, branch T={mismatched}")
    return [
        [epoch, main_lr_at(main_spec, epoch), *(pmoc_lr_at(s, epoch) for s in branch_specs)]
        for epoch in range(T)
    ]


def schedule_csv(rows: Sequence[Sequence[float]], num_branches: int) -> str:
    header = ["epoch", "main", *(f"branch{b + 1}" for b in range(num_branches))]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([str(int(row[0]))] + [f"{v:.10g}" for v in row[1:]]))
    return "\n".join(lines) + "\n"


def write_schedule_csv(path, rows: Sequence[Sequence[float]], num_branches: int) -> None:
    Path(path).write_text(schedule_csv(rows, num_branches), newline="\n")


def read_schedule_csv(path) -> tuple[list[str], list[list[float]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [[float(v) for v in line.split(",")] for line in lines[1:] if line]
