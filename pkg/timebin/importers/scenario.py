"""Utilities for importing scenario files into validated configuration objects."""
from __future__ import annotations

import configparser
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Type, Union

from pydantic import BaseModel, ValidationError

from timebin.core.errors import ConfigError
from timebin.schemas import (
    AnalysisConfig,
    ChannelConfig,
    ScenarioConfig,
    ScenarioMeta,
    SessionConfig,
    SourceConfig,
    SyncConfig,
)

logger = logging.getLogger(__name__)

SECTION_MODELS: Dict[str, Type[BaseModel]] = {
    "scenario": ScenarioMeta,
    "source": SourceConfig,
    "channel": ChannelConfig,
    "session": SessionConfig,
    "sync": SyncConfig,
    "analysis": AnalysisConfig,
}

# Shorthand spellings accepted in scenario files.
KEY_ALIASES: Dict[str, Dict[str, str]] = {
    "source": {"pair_rate": "pair_rate_hz", "visibility": "tsup_visibility", "phase": "phase_rad"},
    "channel": {
        "background": "background_bob",
        "background_bob_hz": "background_bob",
        "background_alice_hz": "background_alice",
        "jitter_ps": "jitter_sigma_ps",
        "dark_hz": "dark_rate_hz",
        "drift_ps_per_s": "clock_drift_ps_per_s",
        "offset_ps": "clock_offset_ps",
    },
    "session": {"duration": "duration_s"},
    "analysis": {"dimensions": "d_list", "tau_ps": "tau_mzi_ps"},
}


def resolve_key(section: str, key: str) -> str:
    normalized = key.strip().lower().replace("-", "_").replace(" ", "_")
    return KEY_ALIASES.get(section, {}).get(normalized, normalized)


def format_validation_error(exc: ValidationError, prefix: str = "") -> str:
    """One ``section.field: message`` line per pydantic error."""

    lines = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error.get("loc", ()) if part != "__root__")
        if prefix:
            location = f"{prefix}.{location}" if location else prefix
        message = error.get("msg", "invalid value")
        if message.startswith("Value error, "):
            message = message[len("Value error, "):]
        lines.append(f"{location}: {message}" if location else message)
    return "\n".join(lines)


def _collect_sections(parser: configparser.ConfigParser, label: str) -> Dict[str, Dict[str, str]]:
    unknown_sections = [name for name in parser.sections() if name.lower() not in SECTION_MODELS]
    if parser.defaults():
        unknown_sections.append(parser.default_section)
    if unknown_sections:
        raise ConfigError(f"{label}: unknown section(s): {', '.join(sorted(unknown_sections))}")

    sections: Dict[str, Dict[str, str]] = {}
    unknown_keys = []
    for name in parser.sections():
        section = name.lower()
        allowed = SECTION_MODELS[section].model_fields
        values: Dict[str, str] = {}
        for key, raw in parser.items(name, raw=True):
            field = resolve_key(section, key)
            if field not in allowed:
                unknown_keys.append(f"{section}.{key}")
                continue
            values[field] = raw.strip()
        sections[section] = values
    if unknown_keys:
        raise ConfigError(f"{label}: unknown key(s): {', '.join(unknown_keys)}")
    return sections


def build_scenario(sections: Mapping[str, Mapping[str, Any]], label: str = "scenario") -> ScenarioConfig:
    """Validate raw section dictionaries into a :class:`ScenarioConfig`."""

    try:
        return ScenarioConfig.model_validate({name: dict(values) for name, values in sections.items()})
    except ValidationError as exc:
        raise ConfigError(f"{label}: invalid configuration\n{format_validation_error(exc)}") from exc


def parse_scenario_text(text: str, label: str = "<string>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=label)
    except configparser.Error as exc:
        raise ConfigError(f"{label}: {exc}") from exc
    return build_scenario(_collect_sections(parser, label), label)


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    """Read a scenario file; every failure surfaces as :class:`ConfigError`."""

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Scenario file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Could not read scenario file {path}: {exc}") from exc
    config = parse_scenario_text(text, label=str(path))
    logger.debug("Loaded scenario '%s' from %s.", config.name, path)
    return config


def scenario_from_snapshot(snapshot: Mapping[str, Any]) -> ScenarioConfig:
    """Rebuild a scenario from a manifest's config snapshot."""

    return build_scenario(snapshot, label="manifest")


__all__ = [
    "build_scenario",
    "format_validation_error",
    "load_scenario",
    "parse_scenario_text",
    "resolve_key",
    "scenario_from_snapshot",
]
