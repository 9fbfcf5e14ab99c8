"""INI-style experiment files: ``key = value`` pairs under a section header."""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing


class ConfigError(ValueError):
    pass


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        return tuple(_coerce(part, args[0], key) for part in raw.replace(" ", "").split(",") if part)
    try:
        if tp is bool:
            if raw.strip().lower() in ("1", "true", "yes", "on"):
                return True
            if raw.strip().lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def from_mapping(cls, values: typing.Mapping[str, str], where: str = "config"):
    """Build dataclass ``cls`` from string values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[name] = _coerce(raw, hints[name], key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_mapping(obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        out[f.name] = "none" if value is None else str(value)
    return out


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def read_section(path, section: str, cls):
    sections = read_sections(path)
    if section not in sections:
        raise ConfigError(f"{path}: missing [{section}] section")
    return from_mapping(cls, sections[section], f"{path} [{section}]")


def write_sections(path, sections: dict[str, object]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, obj in sections.items():
        parser[name] = to_mapping(obj)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
