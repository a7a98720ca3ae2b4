"""Experiment configuration: dataclass sections addressed by flat dotted keys.

A config file is plain text with one ``section.key = value`` per line and
``#`` comments, e.g.::

    model.kind = lorenz96
    da.relaxation = rtpp
    da.alpha = 0.9
    run.n_cycles = 2000

Unknown sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields

from .letkf import DaConfig
from .thinning import ThinningConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    kind: str = "lorenz96"  # lorenz96 | surrogate
    steps_per_cycle: int = 1
    # Lorenz-96
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    spacing_km: float = 150.0
    # surrogate
    n_lon: int = 64
    n_lat: int = 32
    levels: tuple[float, ...] = (925.0, 850.0, 700.0, 600.0, 500.0, 250.0, 50.0)
    speeds: tuple[float, ...] = (1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 1.0)
    surface_speed: float = 1.0
    relaxation: float = 0.0005
    diffusion: float = 0.005


@dataclass
class ObsSection:
    source: str = "synthetic"  # synthetic | file | none
    path: str = ""
    network: str = "ring"  # ring | random
    ring_every: int = 1
    n_per_var: int = 400
    variables: tuple[str, ...] = ("U", "V", "T", "Q", "PS")
    cluster_fraction: float = 0.6
    time_jitter: int = 0  # seconds; synthetic obs times spread uniformly in +/- this
    seed: int = 1
    thin: bool = False
    t_is_virtual: bool = False
    q_error_is_rh: bool = False
    error_u: float = 1.0
    error_v: float = 1.0
    error_t: float = 1.0
    error_q: float = 0.001
    error_ps: float = 1.0
    error_x: float = 1.0

    def error_std(self) -> dict[str, float]:
        return {"U": self.error_u, "V": self.error_v, "T": self.error_t,
                "Q": self.error_q, "PS": self.error_ps, "X": self.error_x}


@dataclass
class InitSection:
    mode: str = "lagged"  # lagged | perturb
    stride: int = 20  # model steps between lagged members
    magnitude: float = 1.0
    seed: int = 7


@dataclass
class NatureSection:
    seed: int = 0
    spinup_steps: int = 1000


@dataclass
class RunSection:
    n_cycles: int = 100
    spinup_cycles: int | None = None  # default n_cycles // 24
    start_time: int = 1451606400  # 2016-01-01T00:00Z
    cycle_seconds: int = 21600
    output_dir: str = "out"
    metrics: bool = True
    spread_vs_truth: bool = False
    snapshot_every: int = 0
    checkpoint_every: int = 0
    archive_every: int = 0
    innovations: bool = True
    maps: bool = True


@dataclass
class ForecastSection:
    lead_times: tuple[int, ...] = (0, 1, 2, 4, 8, 12, 16, 20)
    n_init: int = 50


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    da: DaConfig = field(default_factory=DaConfig)
    thinning: ThinningConfig = field(default_factory=ThinningConfig)
    obs: ObsSection = field(default_factory=ObsSection)
    init: InitSection = field(default_factory=InitSection)
    nature: NatureSection = field(default_factory=NatureSection)
    run: RunSection = field(default_factory=RunSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.run.n_cycles < 1:
            raise ConfigError("run.n_cycles must be at least 1")
        if self.spinup_cycles >= self.run.n_cycles:
            raise ConfigError("run.spinup_cycles must be below run.n_cycles")
        if self.model.kind not in ("lorenz96", "surrogate"):
            raise ConfigError(f"unknown model.kind {self.model.kind!r}")
        if self.obs.source not in ("synthetic", "file", "none"):
            raise ConfigError(f"unknown obs.source {self.obs.source!r}")
        if self.init.mode not in ("lagged", "perturb"):
            raise ConfigError(f"unknown init.mode {self.init.mode!r}")

    @property
    def spinup_cycles(self) -> int:
        s = self.run.spinup_cycles
        return self.run.n_cycles // 24 if s is None else s


def _coerce(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(text, inner)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if origin in (tuple, list):
        elem = args[0] if args else str
        items = [s for s in text.replace(";", ",").split(",") if s.strip()]
        return tuple(_coerce(s, elem) for s in items)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ConfigError(f"unsupported config type {tp}")


def _section_types(cls):
    return typing.get_type_hints(cls)


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    """Return a new config with ``section.key`` string values applied."""
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates: dict[str, dict] = {}
    for key, raw in items.items():
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = _section_types(type(sections[sec]))
        if name not in hints or name.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates.setdefault(sec, {})[name] = _coerce(raw, hints[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    new_sections = {}
    for sec, obj in sections.items():
        try:
            new_sections[sec] = dataclasses.replace(obj, **updates.get(sec, {}))
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    return ExperimentConfig(**new_sections)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in items:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = val.strip()
    return items


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    items = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            items = parse_config_text(fh.read(), str(path))
    items.update(overrides or {})
    return apply_overrides(ExperimentConfig(), items)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            if f.name.startswith("_"):
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{sec.name}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
