"""Plain-text ``key = value`` config files with ``[section]`` headers."""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


def load_config(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def coerce(value: str, like):
    """Parse ``value`` to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(coerce(p, like[0]) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {type(like).__name__}") from exc
    return value


def merged(section: dict[str, str], flags: dict, defaults: dict) -> dict:
    """Config section values overridden by explicitly given CLI flags.

    ``flags`` maps keys to parsed CLI values, ``None`` meaning "not given".
    Unknown config keys are rejected.
    """
    out = dict(defaults)
    for k, v in section.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = coerce(v, defaults[k]) if defaults[k] is not None else v
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out
