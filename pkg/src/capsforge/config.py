"""Experiment configuration: INI-style files, flag overrides and ``run.lock`` files."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path

from .io import atomic_write_text

LOCK_NAME = "run.lock"
LOCK_VERSION = 1


class ConfigError(ValueError):
    """Bad or missing configuration (reported with exit code 2)."""


@dataclass(frozen=True)
class Option:
    name: str
    type: type = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    kind: str = "value"  # value | path | list | paths | flag
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def parse(self, raw):
        """Convert a string (from a file) or an already-typed flag value."""
        if raw is None:
            return None
        try:
            if self.kind == "flag":
                if isinstance(raw, bool):
                    return raw
                text = str(raw).strip().lower()
                if text not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {raw!r}")
                return text in ("true", "1", "yes")
            if self.kind in ("list", "paths"):
                items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
                return tuple(self.type(str(s).strip()) for s in items)
            value = self.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: {exc}") from None
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.name} must be one of {', '.join(map(str, self.choices))}; got {value!r}")
        return value

    def render(self, value) -> str:
        if value is None:
            return ""
        if self.kind == "list":
            return ",".join(_fmt(v) for v in value)
        if self.kind == "paths":
            return ",".join(str(Path(v).resolve()) for v in value)
        if self.kind == "path":
            return str(Path(value).resolve())
        return _fmt(value)


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parser


def resolve(command: str, options: list[Option], flags: dict, parser: configparser.ConfigParser | None) -> dict:
    """Flag value, else ``[command]`` entry, else ``[global]`` entry, else the default."""
    sections = [s for s in (command, "global") if parser is not None and parser.has_section(s)]
    known = {o.name for o in options}
    for s in sections:
        unknown = set(parser[s]) - known - ({"command", "version"} if s == command else set())
        if s == command and unknown:
            raise ConfigError(f"[{s}] has unknown keys: {', '.join(sorted(unknown))}")
    out = {}
    for opt in options:
        raw = flags.get(opt.name)
        if raw is None:
            for s in sections:
                if opt.name in parser[s] and parser[s][opt.name].strip() != "":
                    raw = parser[s][opt.name]
                    break
        value = opt.parse(raw) if raw is not None else opt.default
        if value is None and opt.required:
            raise ConfigError(f"missing required setting {opt.flag}")
        out[opt.name] = value
    return out


def lock_text(command: str, options: list[Option], values: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"command": command, "version": str(LOCK_VERSION)}
    parser[command] = {o.name: o.render(values[o.name]) for o in options}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_lock(out_dir, command: str, options: list[Option], values: dict) -> Path:
    path = Path(out_dir) / LOCK_NAME
    atomic_write_text(path, lock_text(command, options, values))
    return path


def lock_command(path) -> str:
    parser = read_config(path)
    if not parser.has_section("run") or "command" not in parser["run"]:
        raise ConfigError(f"{path} is not a run.lock file (no [run] command)")
    return parser["run"]["command"]
