"""Tunable protocol and experiment parameters, with file/env/flag layering."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .content_store import DEFAULT_CHUNK_SIZE, DEFAULT_FANOUT, MAX_BLOCK_BYTES

CONFIG_ENV = "ACST_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    fanout: int = DEFAULT_FANOUT
    window: int = 16
    header_bytes: int = 64
    max_block_bytes: int = MAX_BLOCK_BYTES
    # calibrated so the join threshold lands at ~100 kbit/s with 10 ms links
    handshake_bytes: int = 62_500
    handshake_timeout_ms: float = 5_000.0
    provider_interval_s: float = 30.0
    liveness_factor: float = 3.0
    stall_timeout_s: float = 60.0
    want_timeout_s: float = 45.0
    seed: int = 0

    def __post_init__(self):
        positive = ("chunk_size", "window", "header_bytes", "max_block_bytes", "handshake_bytes",
                    "handshake_timeout_ms", "provider_interval_s", "liveness_factor",
                    "stall_timeout_s", "want_timeout_s")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.fanout < 2:
            raise ConfigError("fanout must be >= 2")
        if self.chunk_size > self.max_block_bytes:
            raise ConfigError("chunk_size exceeds max_block_bytes")

    @property
    def liveness_timeout_s(self) -> float:
        return self.provider_interval_s * self.liveness_factor

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def merged(self, overrides: Mapping[str, Any] | None) -> "Config":
        """Return a copy with ``overrides`` applied; ``None`` values are ignored."""
        if not overrides:
            return self
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def resolve_config(config_path: str | None = None, flags: Mapping[str, Any] | None = None) -> Config:
    """Built-in defaults < config file (``--config`` or ``$ACST_CONFIG``) < flags."""
    config = Config()
    path = config_path or os.environ.get(CONFIG_ENV)
    if path:
        config = config.merged(load_config_file(path))
    return config.merged(flags)
