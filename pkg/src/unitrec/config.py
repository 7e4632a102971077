"""Run configuration: INI file, then ``UNITREC_<SECTION>__<KEY>`` env vars, then CLI overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from unitrec.data import SyntheticSpec
from unitrec.model import ModelConfig
from unitrec.training import TrainConfig

ENV_PREFIX = "UNITREC_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    SECTIONS = ("model", "train", "data", "paths")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for section in self.SECTIONS:
            obj = getattr(self, section)
            parser[section] = {
                f.name: "none" if getattr(obj, f.name) is None else str(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
            }
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: str, type_name: str, where: str):
    text = raw.strip()
    optional = "None" in type_name
    base = type_name.replace("| None", "").replace("None |", "").strip()
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {base}") from None


def _apply(obj, overrides: Mapping[str, str], section: str, source: str):
    # INI and env keys arrive lower-cased, so match field names case-insensitively
    fields = {f.name.lower(): f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in overrides.items():
        f = fields.get(key.lower())
        if f is None:
            raise ConfigError(f"{source}: unknown key {section}.{key}")
        changes[f.name] = _coerce(raw, str(f.type), f"{source} {section}.{f.name}")
    if not changes:
        return obj
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid [{section}] settings ({exc})") from None


def resolve_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Build a fully-resolved RunConfig; ``overrides`` maps ``section.key`` to a string value."""
    layers: list[tuple[str, dict[str, dict[str, str]]]] = []
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        file_layer = {}
        for section in parser.sections():
            if section not in RunConfig.SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            file_layer[section] = dict(parser[section])
        layers.append((str(path), file_layer))

    env = os.environ if environ is None else environ
    env_layer: dict[str, dict[str, str]] = {}
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        if "__" not in rest:
            continue
        section, key = rest.split("__", 1)
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"environment: unknown section in {name}")
        env_layer.setdefault(section, {})[key] = value
    layers.append(("environment", env_layer))

    cli_layer: dict[str, dict[str, str]] = {}
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"override {dotted!r}: unknown section")
        cli_layer.setdefault(section, {})[key] = value
    layers.append(("command line", cli_layer))

    cfg = RunConfig()
    for source, layer in layers:
        for section, values in layer.items():
            cfg = dataclasses.replace(
                cfg, **{section: _apply(getattr(cfg, section), values, section, source)}
            )
    return cfg
