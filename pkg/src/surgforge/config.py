"""Run configuration: one YAML file with a section per stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class IngestConfig:
    catalog: Path | None = None
    asr_dir: Path | None = None
    min_s: float = 15.0
    max_s: float = 30.0


@dataclass
class ExtractConfig:
    min_words: int = 10
    retries: int = 2
    temperature: float = 0.0
    max_tokens: int = 1024
    prompt_version: str = "v1"


@dataclass
class GenerateConfig:
    retries: int = 2
    temperature: float = 0.2
    max_tokens: int = 512
    prompt_version: str = "v1"


@dataclass
class AlignConfig:
    triplets: Path | None = None
    min_s: float = 30.0
    max_s: float = 60.0
    sample_size: int | None = None
    retries: int = 2
    temperature: float = 0.2
    max_tokens: int = 512
    prompt_version: str = "v1"


@dataclass
class SplitConfig:
    test_fraction: float = 0.1


@dataclass
class EvaluateConfig:
    predictions: Path | None = None
    references: Path | None = None
    human: Path | None = None
    retries: int = 2
    temperature: float = 0.0
    max_tokens: int = 512
    prompt_version: str = "v1"


@dataclass
class StatsConfig:
    verbs: Path | None = None
    nouns: Path | None = None
    top_k: int = 20


@dataclass
class Config:
    out: Path = Path("out")
    seed: int = 0
    backend: str = "mock"
    endpoint: str = "http://localhost:8000/v1"
    model: str = "llama-3-70b-instruct"
    judge_model: str = "gpt-3.5-turbo-0125"
    max_in_flight: int = 4
    requests_per_second: float | None = None
    fixtures: Path | None = None
    prompts: Path | None = None
    video_token: str = "<video>"
    stop_token: str = "<STOP>"
    ingest: IngestConfig = field(default_factory=IngestConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def validate(self) -> None:
        if self.backend not in ("live", "mock", "record"):
            raise ConfigError(f"backend must be live, mock or record, got {self.backend!r}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.backend in ("mock", "record") and self.fixtures is None:
            raise ConfigError(f"backend {self.backend!r} needs a fixtures directory")
        if not 0 < self.split.test_fraction < 1:
            raise ConfigError("split.test_fraction must lie in (0, 1)")
        for name, section in (("ingest", self.ingest), ("align", self.align)):
            if section.min_s <= 0 or section.max_s < 2 * section.min_s:
                raise ConfigError(f"{name}: need 0 < min_s and max_s >= 2 * min_s")


def _is_path(tp) -> bool:
    return "Path" in str(tp)


def _build(cls, data: dict, base: Path, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        label = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            kwargs[name] = _build(f.default_factory, value or {}, base, label)
        elif value is None:
            kwargs[name] = None
        elif _is_path(f.type):
            kwargs[name] = (base / str(value)).resolve()
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def load_config(path: str | Path | None) -> Config:
    """Read a YAML config; relative paths resolve against the file's directory."""
    if path is None:
        return Config()
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    config = _build(Config, data, path.parent.resolve(), "")
    config.validate()
    return config
