"""Flat ``key=value`` config files mapped onto dataclasses.

One assignment per line, ``#`` starts a comment, blank lines are ignored.
Keys must be field names of the target dataclass; values are parsed with
the field's annotated type (``int``, ``float``, ``bool``, ``str`` or a
tuple of floats written comma-separated).
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    """Invalid config; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(key, text, kind):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if typing.get_origin(kind) is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(key, f"unsupported field type {kind}")


def parse_pairs(text):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(key, "duplicate key")
        pairs[key] = value.strip()
    return pairs


def from_pairs(cls, pairs, strict=True):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in pairs.items():
        if key not in names:
            if strict:
                raise ConfigError(key, f"unknown key for {cls.__name__}")
            continue
        kwargs[key] = _parse(key, value, hints[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(getattr(exc, "key", cls.__name__), str(exc)) from None


def loads(cls, text, strict=True):
    return from_pairs(cls, parse_pairs(text), strict=strict)


def load(cls, path, strict=True):
    with open(path, encoding="utf-8") as fh:
        return loads(cls, fh.read(), strict=strict)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def dumps(obj):
    return "".join(f"{f.name}={_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
