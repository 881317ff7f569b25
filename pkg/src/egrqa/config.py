"""Application configuration: defaults, overlaid by a JSON file, overlaid by flags."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .chat import ChatConfig
from .corpus import SplitterConfig
from .embedding import EmbedderConfig
from .errors import ContractError
from .pipeline import PipelineConfig


@dataclass(frozen=True)
class Paths:
    corpus_dir: str | None = None
    chunks: str | None = None
    index: str | None = None
    dataset: str | None = None
    traces: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class AppConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    chat: ChatConfig = field(default_factory=ChatConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    splitter: SplitterConfig = field(default_factory=SplitterConfig)
    paths: Paths = field(default_factory=Paths)

    def snapshot(self) -> dict[str, Any]:
        d = asdict(self)
        d["splitter"]["separators"] = list(self.splitter.separators)
        return d


_SECTIONS = {
    "embedder": EmbedderConfig,
    "chat": ChatConfig,
    "pipeline": PipelineConfig,
    "splitter": SplitterConfig,
    "paths": Paths,
}


def _merge(base: dict[str, Any], over: Mapping[str, Any], where: str = "") -> None:
    for key, value in over.items():
        if key not in base:
            raise ContractError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ContractError(f"config key {where}{key} must be a section")
            _merge(base[key], value, f"{where}{key}.")
        elif value is not None:
            base[key] = value


def load_config(path: str | Path | None = None, overrides: Mapping[str, Mapping[str, Any]] | None = None) -> AppConfig:
    """Build an ``AppConfig`` from defaults, an optional JSON file, then ``overrides``.

    ``None`` values in ``overrides`` mean "not given" and leave lower layers alone.
    """
    data = AppConfig().snapshot()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, Mapping):
            raise ContractError(f"config {path} must hold a JSON object")
        _merge(data, doc)
    if overrides:
        _merge(data, overrides)
    return from_dict(data)


def from_dict(data: Mapping[str, Any]) -> AppConfig:
    built = {}
    for name, cls in _SECTIONS.items():
        section = copy.deepcopy(dict(data.get(name, {})))
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ContractError(f"unknown keys in [{name}]: {sorted(unknown)}")
        if name == "splitter" and "separators" in section:
            section["separators"] = tuple(section["separators"])
        try:
            built[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid [{name}] config: {exc}") from exc
    return AppConfig(**built)
