"""Run configuration: typed sections, named profiles, key=value files and env overrides.

Config files hold one ``section.key = value`` pair per line (``#`` starts a
comment). Any key can also be overridden with an environment variable named
``FEX4D_<SECTION>_<KEY>`` in upper case, e.g. ``FEX4D_DENOISER_LAYERS=4``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig, TrainSettings
from .errors import ConfigError
from .retarget import RetargetConfig, RetargetTrainSettings
from .sampler import GuidanceConfig
from .schedule import PAPER_BETA_END, PAPER_BETA_START, PAPER_T, NoiseSchedule, make_schedule, scaled_schedule

ENV_PREFIX = "FEX4D_"


@dataclass
class ScheduleSection:
    T: int = PAPER_T
    beta_start: float = PAPER_BETA_START
    beta_end: float = PAPER_BETA_END
    # stretch the betas by reference_T / T so short chains keep the same noise budget
    scale_to_reference: bool = False

    def build(self) -> NoiseSchedule:
        if self.scale_to_reference:
            return scaled_schedule(self.T, PAPER_T, self.beta_start, self.beta_end)
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainSection:
    steps: int = 200_000
    batch_size: int = 256
    lr: float = 1e-4
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr >= 0 required")

    def settings(self, seed: int) -> TrainSettings:
        return TrainSettings(self.steps, self.batch_size, self.lr, seed, self.grad_clip or None)


@dataclass
class GuideNetSection(TrainSection):
    half_width: bool = True


@dataclass
class RetargetSection:
    channels: tuple = (16, 32, 64, 128, 128)
    spiral_k: int = 9
    levels: int = 3
    fusion: str = "attention"
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    landmark_weight: float = 1.0

    def __post_init__(self):
        if self.fusion not in ("attention", "mean"):
            raise ValueError(f"fusion must be 'attention' or 'mean', got {self.fusion!r}")
        if len(self.channels) != 5:
            raise ValueError("channels must list five encoder widths")

    def model_config(self) -> RetargetConfig:
        return RetargetConfig(channels=tuple(self.channels), spiral_k=self.spiral_k, levels=self.levels,
                              fusion=self.fusion)

    def settings(self, seed: int) -> RetargetTrainSettings:
        return RetargetTrainSettings(self.steps, self.batch_size, self.lr, self.landmark_weight, seed)


@dataclass
class ICSection:
    hidden: int = 128
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.1
    patience: int = 10


@dataclass
class DataSection:
    n_sequences: int = 400
    n_classes: int = 2
    length_min: int = 35
    length_max: int = 45
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not 2 <= self.length_min <= self.length_max:
            raise ValueError("need 2 <= length_min <= length_max")


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    classifier: GuideNetSection = field(default_factory=GuideNetSection)
    text_head: GuideNetSection = field(default_factory=GuideNetSection)
    retarget: RetargetSection = field(default_factory=RetargetSection)
    ic: ICSection = field(default_factory=ICSection)
    data: DataSection = field(default_factory=DataSection)

    def guide_config(self, section: GuideNetSection) -> DenoiserConfig:
        return self.denoiser.half_width() if section.half_width else self.denoiser

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES = {
    "paper": {},
    "desk": {
        "schedule.T": 200,
        "schedule.scale_to_reference": True,
        "denoiser.layers": 4,
        "denoiser.heads": 4,
        "denoiser.model_dim": 128,
        "denoiser.feedforward_dim": 512,
        "train.steps": 5000,
        "train.batch_size": 32,
        "classifier.steps": 2000,
        "classifier.batch_size": 32,
        "classifier.lr": 3e-4,
        "text_head.steps": 2000,
        "text_head.batch_size": 32,
        "text_head.lr": 3e-4,
    },
}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a new config with ``section.key`` overrides applied and validated."""
    sections = {f.name: dataclasses.asdict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    for key, value in overrides.items():
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(getattr(cfg, sec), name)
        sections[sec][name] = _parse_value(value, default, key) if isinstance(value, str) else value
    try:
        built = {}
        for f in dataclasses.fields(cfg):
            sec_cls = type(getattr(cfg, f.name))
            built[f.name] = sec_cls(**sections[f.name])
        return RunConfig(**built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return apply_overrides(RunConfig(), PROFILES[name])


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        out[key.strip()] = value.strip()
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    known = {}
    for f in dataclasses.fields(cfg):
        for name in dataclasses.asdict(getattr(cfg, f.name)):
            known[f"{ENV_PREFIX}{f.name}_{name}".upper()] = f"{f.name}.{name}"
    out = {}
    for var, value in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        if var not in known:
            raise ConfigError(f"unknown config environment variable {var}")
        out[known[var]] = value
    return out


def load_config(profile_name: str = "desk", path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Profile, then file, then environment, then explicit overrides."""
    merged = dict(PROFILES.get(profile_name, {}))
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile {profile_name!r}; choose from {sorted(PROFILES)}")
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        merged.update(parse_config_text(p.read_text(), str(p)))
    merged.update(env_overrides(environ))
    merged.update(overrides or {})
    return apply_overrides(RunConfig(), merged)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec, values in cfg.to_dict().items():
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{sec}.{k} = {v}")
    return "\n".join(lines) + "\n"
