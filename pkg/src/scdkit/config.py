"""Single-file run configuration with command-line overrides.

One TOML or JSON file holds a table per subcommand; an explicit flag on
the command line always beats the file, and the file beats built-in
defaults. Nothing here knows about specific keys, so subcommands own
their own vocabularies.
"""

from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError


def load_config(path: str | Path) -> dict:
    """Parse a .toml or .json file into a nested dict of sections."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            payload = tomllib.loads(path.read_text())
        elif suffix == ".json":
            payload = json.loads(path.read_text())
        else:
            raise ConfigError(
                f"config file must be .toml or .json, got {path.name!r}"
            )
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config root in {path} must be a table/object")
    return payload


def section(config: dict, name: str) -> dict:
    """Pull one subcommand's table; missing sections are empty."""
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a table/object")
    return dict(value)


def resolve(flag_value, table: dict, key: str, default=None):
    """Precedence: explicit flag, then config file entry, then default."""
    if flag_value is not None:
        return flag_value
    if key in table:
        return table[key]
    return default
