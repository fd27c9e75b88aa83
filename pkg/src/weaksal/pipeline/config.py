"""Pipeline configuration and its ``key = value`` file format.

Nested settings use dotted keys (``crf.iterations = 10``, ``net.scales =
0.5,0.75,1``). Every field is written by ``to_text`` and accepted by
``parse``; unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from weaksal.densecrf import CrfParams
from weaksal.errors import ConfigError
from weaksal.seedsal import SeedConfig
from weaksal.toynet import NetConfig, TrainConfig
from weaksal.updater import UpdaterThresholds

CRF_METHODS = ("auto", "lattice", "dense")
SECTIONS = ("crf", "thresholds", "train", "net", "seed")


@dataclass(frozen=True)
class PipelineConfig:
    max_rounds: int = 5
    stop_mean_mae: float = 0.05
    cam_top_k_stage1: int = 3
    cam_top_k_stage2: int = 5
    binarize_threshold: float = 0.5
    val_fraction: float = 0.2
    crf_method: str = "auto"
    crf: CrfParams = field(default_factory=CrfParams)
    thresholds: UpdaterThresholds = field(default_factory=UpdaterThresholds)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=lambda: NetConfig(n_classes=6))
    seed: SeedConfig = field(default_factory=SeedConfig)

    def validate(self) -> None:
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if not 0.0 <= self.stop_mean_mae <= 1.0:
            raise ConfigError("stop_mean_mae must be in [0, 1]")
        if self.cam_top_k_stage1 < 1 or self.cam_top_k_stage2 < 1:
            raise ConfigError("CAM top-k must be >= 1")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must be in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.crf_method not in CRF_METHODS:
            raise ConfigError(f"crf_method must be one of {CRF_METHODS}")
        self.crf.validate()
        self.thresholds.validate()
        self.train.validate()
        self.net.validate()
        self.seed.validate()

    def with_overrides(self, pairs: dict[str, str]) -> PipelineConfig:
        cfg = self
        for key, raw in pairs.items():
            cfg = _set(cfg, key, raw)
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in SECTIONS:
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name} = {_format(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> PipelineConfig:
        return cls().with_overrides(parse_pairs(text.splitlines()))

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_pairs(lines) -> dict[str, str]:
    """``key = value`` lines (blank lines and ``#`` comments skipped) to a dict."""
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            elem = type(like[0]) if like else float
            return tuple(elem(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def _set(cfg: PipelineConfig, key: str, raw: str) -> PipelineConfig:
    section, dot, name = key.partition(".")
    if dot:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        inner = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(inner)}:
            raise ConfigError(f"unknown config key {key!r}")
        inner = dataclasses.replace(inner, **{name: _convert(raw, getattr(inner, name), key)})
        return dataclasses.replace(cfg, **{section: inner})
    if key in SECTIONS or key not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown config key {key!r}")
    return dataclasses.replace(cfg, **{key: _convert(raw, getattr(cfg, key), key)})
