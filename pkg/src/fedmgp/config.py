"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from pathlib import Path

from .federation import FederationConfig

# Alternative spellings accepted in config files.
ALIASES = {
    "lambda": "lam",
    "participation_fraction": "participation",
    "pairing_mode": "pairing",
    "aggregation_mode": "aggregation",
    "selection_policy": "policy",
    "d": "dim",
    "d_f": "feature_dim",
    "d_pt": "prompt_dim_text",
    "d_pv": "prompt_dim_visual",
    "tau_m": "model_temperature",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _convert(raw: str, kind: str, key: str):
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key} expects an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key} expects a number, got {raw!r}") from None
    return raw


def parse_config_text(text: str, path: str | None = None, base: dict | None = None) -> FederationConfig:
    """Parse config text; keys not given keep their defaults (or the values in ``base``)."""
    types = FederationConfig.field_types()
    values = dict(base or {})
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", lineno, path)
        key, raw = (part.strip() for part in content.split("=", 1))
        name = ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if name in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[name]})", lineno, path)
        if not raw:
            raise ConfigError(f"missing value for {key!r}", lineno, path)
        try:
            values[name] = _convert(raw, types[name], key)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, path) from None
        seen[name] = lineno
    try:
        return FederationConfig(**values).validate()
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}", None, path) from None


def parse_config(path) -> FederationConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def format_config(config: FederationConfig) -> str:
    """Inverse of :func:`parse_config_text`."""
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
