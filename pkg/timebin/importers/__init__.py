"""Scenario file import helpers."""

from .scenario import load_scenario, parse_scenario_text

__all__ = ["load_scenario", "parse_scenario_text"]
