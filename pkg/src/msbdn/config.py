"""Flat ``key=value`` config files and dataclass (de)serialization."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_lines(text):
    """Parse ``key=value`` lines; ``#`` starts a comment. Later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path):
    return parse_lines(Path(path).read_text(encoding="utf-8"))


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(raw, tp, key):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p for p in raw.replace(",", " ").split() if p]
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(_convert(p, a, key) for p, a in zip(parts, args))
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}: {tp}")


def valid_keys(*classes):
    return sorted({f.name for cls in classes for f in dataclasses.fields(cls)})


def check_keys(values, *classes):
    allowed = set(valid_keys(*classes))
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(allowed))}")


def build(cls, values, strict=False):
    """Instantiate dataclass ``cls`` from string values (extra keys ignored unless strict)."""
    if strict:
        check_keys(values, cls)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = _convert(str(values[f.name]), hints[f.name], f.name)
    return cls(**kwargs)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_lines(obj, prefix=""):
    return "".join(f"{prefix}{f.name}={_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
