"""Flat ``key = value`` run configuration with flag overrides."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

OUT_ENV = "DANCELAB_OUT"


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        return parse_config(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e


def merge(file_values: Mapping[str, str], overrides: Mapping[str, object]) -> dict[str, str]:
    """Flags win over the file; ``None`` overrides mean the flag was not given."""
    out = dict(file_values)
    out.update({k: _fmt(v) for k, v in overrides.items() if v is not None})
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def render(values: Mapping[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def get(values: Mapping[str, str], key: str, kind=str, default=None):
    if key not in values:
        return default
    raw = values[key]
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or "runs")
