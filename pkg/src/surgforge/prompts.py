"""Versioned prompt assets shipped under ``prompts/{family}/{version}/``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

PROMPT_ROOT = Path(__file__).parent / "prompts"


@dataclass(frozen=True)
class FewShot:
    title: str
    transcript: str
    units: tuple[dict, ...]


def prompt_dir(family: str, version: str, root: str | Path | None = None) -> Path:
    path = Path(root or PROMPT_ROOT) / family / version
    if not path.is_dir():
        raise ConfigError(f"no {family} prompts for version {version!r} under {path.parent}")
    return path


def read_text(family: str, version: str, name: str, root=None) -> str:
    path = prompt_dir(family, version, root) / name
    try:
        return path.read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        raise ConfigError(f"missing prompt asset {path}") from None


def load_fewshot(version: str, root=None) -> list[FewShot]:
    path = prompt_dir("extraction", version, root) / "fewshot.json"
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [FewShot(d["title"], d["transcript"], tuple(d["units"])) for d in data]
