"""Run configuration: INI-style sections, ``--section.key=value`` overrides, echo for reports."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig
from .frontend import EncoderConfig, n_frames
from .metrics import DcfCosts

CACHE_ENV = "ANTISPOOF_CACHE_DIR"


@dataclass
class ModelSection:
    variant: str = "nes2net-la"
    channels: int = 64  # C
    splits: int = 8  # J
    radius: int = 1  # K
    ws_branches: int = 2
    se_reduction: int = 4
    kernel_size: int = 3
    d_attn: int = 8
    n_blocks: int = 1
    layers: int = 12  # L
    enc_channels: int = 64
    hop: int = 320
    win: int = 320
    encoder_seed: int = 0
    sample_rate: int = 16000
    segment_seconds: float = 4.0

    @property
    def frames(self) -> int:
        """T', always derived from the segment length and framing."""
        return n_frames(int(round(self.segment_seconds * self.sample_rate)), self.win, self.hop)

    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            in_channels=self.enc_channels, channels=self.channels, splits=self.splits,
            ws_branches=self.ws_branches, se_reduction=self.se_reduction, kernel_size=self.kernel_size,
            radius=self.radius, d_attn=self.d_attn, n_blocks=self.n_blocks, variant=self.variant,
        )

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.enc_channels, self.hop, self.win, seed=self.encoder_seed)


@dataclass
class TrainSection:
    learning_rate: float = 5e-6
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_steps: int = 5000
    eval_every: int = 100
    seed: int = 0


@dataclass
class TraceSection:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_steps: int = 5000
    se_reduction: int = 4
    seed: int = 0
    threshold: str = "auto"


@dataclass
class DcfSection:
    c_miss: float = 1.0
    c_fa: float = 10.0
    p_target: float = 0.95

    def costs(self) -> DcfCosts:
        return DcfCosts(self.c_miss, self.c_fa, self.p_target)


@dataclass
class PathsSection:
    cache_dir: str = ""


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    trace: TraceSection = field(default_factory=TraceSection)
    dcf: DcfSection = field(default_factory=DcfSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        if self.train.learning_rate <= 0 or self.trace.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.trace.threshold != "auto":
            t = float(self.trace.threshold)
            if not 0.0 <= t <= 1.0:
                raise ValueError("trace.threshold must be 'auto' or lie in [0, 1]")
        self.model.detector()
        self.dcf.costs()
        return self

    @property
    def cache_dir(self) -> Path | None:
        d = os.environ.get(CACHE_ENV) or self.paths.cache_dir
        return Path(d) if d else None

    def set(self, key: str, value: str) -> None:
        """Apply ``section.key=value`` or a bare ``key`` that names one field uniquely."""
        section, _, name = key.rpartition(".")
        candidates = [s.name for s in fields(self) if section in ("", s.name)
                      and name in {f.name for f in fields(getattr(self, s.name))}]
        if not candidates:
            raise KeyError(f"unknown config key {key!r}")
        if len(candidates) > 1:
            raise KeyError(f"ambiguous config key {key!r}; use one of " + ", ".join(f"{c}.{name}" for c in candidates))
        sec = getattr(self, candidates[0])
        ftype = {f.name: f.type for f in fields(sec)}[name]
        setattr(sec, name, _coerce(value, ftype))

    def to_lines(self, prefix: str = "config.") -> list[str]:
        lines = []
        for s in fields(self):
            for k, v in dataclasses.asdict(getattr(self, s.name)).items():
                lines.append(f"{prefix}{s.name}.{k}={v}")
        lines.append(f"{prefix}model.frames={self.model.frames}")
        return lines

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            for k, v in values.items():
                cfg.set(f"{section}.{k}", str(v))
        return cfg


def _coerce(value: str, ftype) -> object:
    t = ftype if isinstance(ftype, str) else ftype.__name__
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return str(value)


def load_config(path: str | Path | None = None, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for key, value in overrides:
        cfg.set(key, value)
    return cfg.validate()


def write_config(path: str | Path, cfg: RunConfig) -> None:
    parser = configparser.ConfigParser()
    for section, values in cfg.to_dict().items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
