"""Client configuration: defaults, then a key=value file, then the environment.

File format, one setting per line::

    # comment
    pool.max_per_key = 8
    metalink.strategy = failover

Every key can be overridden from the environment by its upper-cased,
underscore-separated name, e.g. ``POOL_MAX_PER_KEY=8``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from .engine import EngineLimits
from .errors import ConfigInvalid
from .pool import PoolConfig
from .vector import VectorConfig

STRATEGIES = ("off", "failover", "multistream")


@dataclass
class ClientConfig:
    pool: PoolConfig = field(default_factory=PoolConfig)
    vector: VectorConfig = field(default_factory=VectorConfig)
    limits: EngineLimits = field(default_factory=EngineLimits)
    metalink_strategy: str = "failover"
    metalink_streams: int = 4
    metalink_chunk_size: int = 8 * 1024 * 1024
    credential_id: str = "anonymous"

    def validate(self) -> "ClientConfig":
        self.pool.validate()
        self.vector.validate()
        if self.limits.max_full_body_fallback < 0:
            raise ConfigInvalid("engine.max_full_body_fallback", "must be >= 0")
        if self.metalink_strategy not in STRATEGIES:
            raise ConfigInvalid("metalink.strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.metalink_streams < 1:
            raise ConfigInvalid("metalink.streams", "must be >= 1")
        if self.metalink_chunk_size < 1:
            raise ConfigInvalid("metalink.chunk_size", "must be >= 1")
        if not self.credential_id:
            raise ConfigInvalid("http.credential_id", "must not be empty")
        return self


# key -> (section, attribute, parser)
KEYS = {
    "pool.max_per_key": ("pool", "max_sessions_per_key", int),
    "pool.max_total": ("pool", "max_total_sessions", int),
    "pool.idle_ttl_s": ("pool", "idle_ttl", float),
    "pool.connect_timeout_s": ("pool", "connect_timeout", float),
    "vector.gap_threshold": ("vector", "gap_threshold", int),
    "vector.max_ranges_per_request": ("vector", "max_ranges_per_request", int),
    "vector.max_range_header_bytes": ("vector", "max_range_header_bytes", int),
    "vector.max_concurrent_batches": ("vector", "max_concurrent_batches", int),
    "engine.max_full_body_fallback": ("limits", "max_full_body_fallback", int),
    "metalink.strategy": (None, "metalink_strategy", str),
    "metalink.streams": (None, "metalink_streams", int),
    "metalink.chunk_size": (None, "metalink_chunk_size", int),
    "http.credential_id": (None, "credential_id", str),
    "http.connect_timeout_s": ("pool", "tcp_connect_timeout", float),
    "http.io_timeout_s": ("pool", "io_timeout", float),
}


def env_name(key: str) -> str:
    return key.upper().replace(".", "_")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    settings = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigInvalid(key, f"{source}:{lineno}: expected key=value")
        if key not in KEYS:
            raise ConfigInvalid(key, f"{source}:{lineno}: unknown key")
        settings[key] = value.split(" #", 1)[0].strip()
    return settings


def apply_settings(config: ClientConfig, settings: Mapping[str, str]) -> ClientConfig:
    sections = {"pool": config.pool, "vector": config.vector, "limits": config.limits}
    updates = {name: {} for name in sections}
    top = {}
    for key, raw in settings.items():
        section, attr, conv = KEYS[key]
        try:
            value = conv(raw.strip())
        except ValueError:
            raise ConfigInvalid(key, f"bad value {raw!r}") from None
        if section is None:
            top[attr] = value
        else:
            updates[section][attr] = value
    new = {name: replace(obj, **updates[name]) for name, obj in sections.items()}
    return replace(config, **new, **top)


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> ClientConfig:
    """Build a validated ``ClientConfig``: defaults <- file <- environment."""
    config = ClientConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigInvalid(path, f"cannot read config file: {exc}") from None
        config = apply_settings(config, parse_config_text(text, path))
    environ = os.environ if environ is None else environ
    overrides = {key: environ[env_name(key)] for key in KEYS if env_name(key) in environ}
    config = apply_settings(config, overrides)
    return config.validate()


def dump_config(config: ClientConfig) -> str:
    sections = {"pool": config.pool, "vector": config.vector, "limits": config.limits}
    lines = []
    for key, (section, attr, _) in KEYS.items():
        obj = config if section is None else sections[section]
        value = getattr(obj, attr)
        if value is not None:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


__all__ = ["ClientConfig", "KEYS", "STRATEGIES", "load_config", "dump_config", "env_name",
           "parse_config_text", "apply_settings"]
