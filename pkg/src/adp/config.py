"""Run configuration: dataclass defaults <- config file <- ``--set`` overrides.

Config files are line based::

    # comment
    section.key = value

Lists are written ``[120, 60, 30]`` (brackets optional). Field defaults are the
published full-scale settings; :data:`DESK_PRESET` is the small synthetic
setup the command line uses unless ``--paper-defaults`` is given.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data import SyntheticSpec
from .model import BLOCK_KINDS, FUSE_MODES

DCML_METRICS = ("chebyshev", "manhattan", "euclidean")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    trunk_blocks: int = 12
    clone_depth: int = 4
    k: int = 7
    d: int = 16
    hidden_mult: int = 2
    block_kind: str = "token_mix_lite"
    dymain_blocks: int = 4
    fuse: str = "mean"
    adain_multiply: bool = False
    eps: float = 1e-5
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 120
    eta: float = 0.004
    warmup_epochs: int = 10
    warmup_start_frac: float = 0.01
    floor_frac: float = 0.002
    eta_min: float = 0.004
    gamma_pow: float = 1.806
    lambda_decay: float = 0.5
    periods: list[int] = field(default_factory=lambda: [120, 60, 30, 24, 20, 15, 12])
    momentum: float = 0.9


@dataclass
class LossConfig:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 0.01
    margin: float = 0.3
    dcml_metric: str = "chebyshev"


@dataclass
class DataConfig:
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
    heldout_domain: int = -1
    P: int = 16
    K: int = 4
    steps_per_epoch: int = 0  # 0: one pass over the training samples

    def synthetic_spec(self) -> SyntheticSpec:
        names = {f.name for f in dataclasses.fields(SyntheticSpec)}
        return SyntheticSpec(**{n: getattr(self, n) for n in names})


@dataclass
class IOConfig:
    out_dir: str = "runs/adp"
    checkpoint: str = ""  # empty: <out_dir>/model.ckpt
    metrics_csv: str = ""  # empty: <out_dir>/metrics.csv
    schedule_csv: str = ""  # empty: <out_dir>/schedule.csv


@dataclass
class ToggleConfig:
    enable_dymain: bool = True
    enable_dcml: bool = True
    enable_pmoc: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    io: IOConfig = field(default_factory=IOConfig)
    toggles: ToggleConfig = field(default_factory=ToggleConfig)

    def path(self, key: str) -> Path:
        explicit = getattr(self.io, key)
        default = {"checkpoint": "model.ckpt", "metrics_csv": "metrics.csv", "schedule_csv": "schedule.csv"}[key]
        return Path(explicit) if explicit else Path(self.io.out_dir) / default

    # effective values after the ablation toggles
    @property
    def effective_dymain_blocks(self) -> int:
        return self.model.dymain_blocks if self.toggles.enable_dymain else 0

    @property
    def effective_w3(self) -> float:
        return self.losses.w3 if self.toggles.enable_dcml else 0.0


DESK_PRESET: dict[str, str] = {
    "model.trunk_blocks": "3",
    "model.clone_depth": "2",
    "model.k": "3",
    "model.dymain_blocks": "2",
    "schedules.T": "12",
    "schedules.eta": "0.02",
    "schedules.warmup_epochs": "1",
    "schedules.eta_min": "0.01",
    "schedules.periods": "[12, 6, 4]",
    "data.P": "5",
    "data.K": "4",
}


# -- parsing ------------------------------------------------------------------


def _field_types(obj) -> dict[str, object]:
    return typing.get_type_hints(type(obj))


def _parse_value(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip("\"'")
        if typing.get_origin(typ) is list:
            (inner,) = typing.get_args(typ)
            body = raw.strip("[] ")
            return [inner(v.strip()) for v in body.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(key, f"unsupported field type {typ}")


def apply_setting(config: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    section, _, name = key.partition(".")
    if not name or not hasattr(config, section):
        raise ConfigError(key, "unknown key")
    target = getattr(config, section)
    types = _field_types(target)
    if name not in types:
        raise ConfigError(key, "unknown key")
    setattr(target, name, _parse_value(key, raw, types[name]))


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    settings = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'section.key = value', got {line!r}")
        key, _, value = line.partition("=")
        settings.append((key.strip(), value.strip()))
    return settings


def load_config(
    path=None,
    overrides: Iterable[str] = (),
    preset: dict[str, str] | None = None,
) -> RunConfig:
    """Defaults <- preset <- file <- ``section.key=value`` overrides, then validate."""
    config = RunConfig()
    for key, value in (preset or {}).items():
        apply_setting(config, key, value)
    if path is not None:
        text = Path(path).read_text()
        for key, value in parse_lines(text.splitlines(), str(path)):
            apply_setting(config, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, _, value = item.partition("=")
        apply_setting(config, key, value)
    validate(config)
    return config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


def dump_config(config: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(config):
        obj = getattr(config, section.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{section.name}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def validate(config: RunConfig) -> None:
    m, s, l, d = config.model, config.schedules, config.losses, config.data

    def need(ok: bool, key: str, msg: str) -> None:
        if not ok:
            raise ConfigError(key, msg)

    need(m.k >= 1, "model.k", "must be >= 1")
    need(m.clone_depth >= 1, "model.clone_depth", "must be >= 1")
    need(m.trunk_blocks >= m.clone_depth, "model.trunk_blocks", f"must be >= clone_depth={m.clone_depth}")
    need(0 <= m.dymain_blocks <= m.clone_depth, "model.dymain_blocks", f"must lie in [0, clone_depth={m.clone_depth}]")
    need(m.d >= 1, "model.d", "must be >= 1")
    need(m.hidden_mult >= 1, "model.hidden_mult", "must be >= 1")
    need(m.block_kind in BLOCK_KINDS, "model.block_kind", f"must be one of {BLOCK_KINDS}")
    need(m.fuse in FUSE_MODES, "model.fuse", f"must be one of {FUSE_MODES}")
    need(m.eps > 0, "model.eps", "must be > 0")

    need(s.T >= 1, "schedules.T", "must be >= 1")
    need(len(s.periods) == m.k, "schedules.periods", f"has {len(s.periods)} entries but model.k = {m.k}")
    for p in s.periods:
        need(1 <= p <= s.T, "schedules.periods", f"period {p} outside [1, T={s.T}]")
    need(s.eta > 0, "schedules.eta", "must be > 0")
    need(s.eta_min > 0, "schedules.eta_min", "must be > 0")
    need(s.gamma_pow >= 0, "schedules.gamma_pow", "must be >= 0")
    need(0 < s.lambda_decay <= 1, "schedules.lambda_decay", "must lie in (0, 1]")
    need(0 <= s.warmup_epochs < s.T, "schedules.warmup_epochs", f"must lie in [0, T={s.T})")
    need(0 < s.warmup_start_frac < 1, "schedules.warmup_start_frac", "must lie in (0, 1)")
    need(0 < s.floor_frac < 1, "schedules.floor_frac", "must lie in (0, 1)")
    need(0 <= s.momentum < 1, "schedules.momentum", "must lie in [0, 1)")

    for w in ("w1", "w2", "w3"):
        need(getattr(l, w) >= 0, f"losses.{w}", "must be >= 0")
    need(l.margin >= 0, "losses.margin", "must be >= 0")
    need(l.dcml_metric in DCML_METRICS, "losses.dcml_metric", f"must be one of {DCML_METRICS}")

    need(d.num_ids >= 2, "data.num_ids", "must be >= 2")
    need(d.num_domains >= 2, "data.num_domains", "must be >= 2")
    need(d.samples_per_id_per_domain >= 2, "data.samples_per_id_per_domain", "must be >= 2")
    need(-d.num_domains <= d.heldout_domain < d.num_domains, "data.heldout_domain", "out of range")
    need(d.P >= 2, "data.P", "must be >= 2")
    need(d.K >= 2, "data.K", "must be >= 2")
    need(d.P <= d.num_ids, "data.P", f"exceeds num_ids={d.num_ids}")
    per_id = (d.num_domains - 1) * d.samples_per_id_per_domain
    need(d.K <= per_id, "data.K", f"exceeds the {per_id} training samples per identity")
    need(d.steps_per_epoch >= 0, "data.steps_per_epoch", "must be >= 0")
