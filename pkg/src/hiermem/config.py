"""Engine configuration: TOML with ``${ENV_VAR}`` interpolation in string values."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .embedding import EmbedderConfig
from .errors import ConfigurationError
from .retrieval import RetrievalConfig
from .update import UpdateConfig

_ENV_RE = re.compile(r"\$\{(\w+)\}")


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8765


@dataclass
class EngineConfig:
    store_path: str = "memory.json"
    recompute_embeddings: bool = False
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    chat: dict[str, Any] = field(default_factory=lambda: {"kind": "mock"})
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    service: ServiceConfig | None = None


def _interpolate(value: Any) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                raise ConfigurationError(f"environment variable {name} referenced in config is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def _build(cls, section: dict[str, Any], name: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}] {exc}") from None


def config_from_dict(doc: dict[str, Any]) -> EngineConfig:
    doc = _interpolate(doc)
    known = {"store", "embedder", "chat", "retrieval", "update", "service"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    cfg = EngineConfig()
    if "store" in doc:
        unknown_keys = set(doc["store"]) - {"path", "recompute_embeddings"}
        if unknown_keys:
            raise ConfigurationError(f"[store] unknown keys: {sorted(unknown_keys)}")
        cfg.store_path = str(doc["store"].get("path", cfg.store_path))
        cfg.recompute_embeddings = bool(doc["store"].get("recompute_embeddings", False))
    if "embedder" in doc:
        cfg.embedder = _build(EmbedderConfig, doc["embedder"], "embedder")
    if "chat" in doc:
        cfg.chat = dict(doc["chat"])
    if "retrieval" in doc:
        cfg.retrieval = _build(RetrievalConfig, doc["retrieval"], "retrieval")
    if "update" in doc:
        cfg.update = _build(UpdateConfig, doc["update"], "update")
    if "service" in doc:
        cfg.service = _build(ServiceConfig, doc["service"], "service")
    return cfg


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from None
    cfg = config_from_dict(doc)
    # Relative store paths are relative to the config file.
    if not Path(cfg.store_path).is_absolute():
        cfg.store_path = str(path.parent / cfg.store_path)
    return cfg
