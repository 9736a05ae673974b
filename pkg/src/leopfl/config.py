"""Experiment configuration in INI form.

Every section maps onto a dataclass; keys are the dataclass field names.
Unknown sections or keys are rejected. Values use Python literal syntax
for numbers and booleans (``true``/``false`` also accepted), comma-separated
pairs for tuples and ``none`` for unset optionals.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .constellation import ConstellationConfig
from .data import SyntheticDatasetSpec
from .pfl import PflConfig
from .pruning import PruneHyperparams
from .sr import SrHyper, SrTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SrSection:
    scale: int = 2
    rounds: int = 30
    cohort_size: int = 5
    lr: float = 2.0
    local_epochs: int = 5
    batch_size: int = 4
    smoothing: float = 0.9
    crop: int = 32
    d1: int = 16
    d2: int = 8
    k1: int = 9
    k3: int = 5
    offset: float = 0.5
    train_images: int = 120  # 0 = every training image

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError("sr scale must be 2 or 4")
        if self.rounds < 0 or self.cohort_size < 1:
            raise ValueError("sr rounds must be >= 0 and cohort size >= 1")
        if self.train_images < 0:
            raise ValueError("train_images must be >= 0")

    def hyper(self, channels: int = 3) -> SrHyper:
        return SrHyper(channels, self.d1, self.d2, self.k1, 1, self.k3)

    def train_config(self) -> SrTrainConfig:
        return SrTrainConfig(self.rounds, self.lr, self.local_epochs, self.batch_size,
                             self.smoothing, self.crop)


@dataclass(frozen=True)
class PflSection:
    satellites: int = 10
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    momentum: float = 0.9
    topology: str = "ring"
    dense: bool = False
    dirichlet_alpha: float = 0.3
    preprocess: str = "sr"
    test_per_satellite: int = 40

    def __post_init__(self):
        if self.topology not in ("ring", "los", "full"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.preprocess not in ("original", "bicubic", "sr"):
            raise ValueError(f"unknown preprocess mode {self.preprocess!r}")
        if self.satellites < 1:
            raise ValueError("need at least one satellite")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("pfl rounds and local epochs must be >= 1")

    def pfl_config(self, prune: PruneHyperparams, seed: int, jobs: int = 1) -> PflConfig:
        return PflConfig(self.rounds, self.local_epochs, self.lr, self.batch_size, self.momentum,
                         self.topology, self.dense, jobs, seed, prune)


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    path: str = ""
    num_images: int = 600
    size: int = 64
    classes: int = 10
    freq_low: float = 0.06
    freq_high: float = 0.22
    amplitude: float = 0.22
    tint: float = 0.04
    noise: float = 0.02
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ValueError("directory source needs a path")

    def synthetic_spec(self, seed: int) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(self.num_images, self.size, self.classes, self.freq_low,
                                    self.freq_high, self.amplitude, self.tint, self.noise, seed)


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    out: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    sr: SrSection = field(default_factory=SrSection)
    pfl: PflSection = field(default_factory=PflSection)
    prune: PruneHyperparams = field(default_factory=PruneHyperparams)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=seed))

    def with_out(self, out: str) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, out=str(out)))


SECTIONS = [f.name for f in fields(ExperimentConfig)]


# ------------------------------------------------------------- conversion


def _parse_value(raw: str, annotation: str, where: str):
    text = raw.strip()
    try:
        if annotation.endswith("| None"):
            if text.lower() == "none":
                return None
            return _parse_value(text, annotation[: -len("| None")].strip(), where)
        if annotation == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if annotation == "int":
            return int(text)
        if annotation == "float":
            return float(text)
        if annotation == "str":
            return text
        if annotation.startswith("tuple["):
            return tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {annotation}") from exc
    raise ConfigError(f"{where}: unsupported field type {annotation}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _section_type(name: str):
    return next(f for f in fields(ExperimentConfig) if f.name == name).default_factory


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {}
    for name in SECTIONS:
        cls = _section_type(name)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                kwargs[key] = _parse_value(raw, str(known[key].type), f"[{name}] {key}")
        try:
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return ExperimentConfig(**built)


def dumps(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(config, name)
        parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load(path: Path | str) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(path: Path | str, config: ExperimentConfig) -> None:
    Path(path).write_text(dumps(config))
