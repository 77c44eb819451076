"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are parsed as JSON when
possible (numbers, ``true``, ``[1, 2]``), otherwise kept as bare strings.
"""

import dataclasses
import json

from .records import ConfigError


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def dump_kv(mapping):
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in mapping.items())


def dataclass_from_kv(cls, values, source="<config>"):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_dataclass(cls, path):
    with open(path, encoding="utf-8") as fh:
        return dataclass_from_kv(cls, parse_kv(fh.read(), path), path)
