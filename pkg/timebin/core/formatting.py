"""Helpers for consistent user-facing labels in summaries and workbooks."""
from __future__ import annotations

import math
from datetime import datetime, timezone
from typing import Any, Optional

from dateutil import parser as date_parser

DISPLAY_DATETIME_FORMAT = "%Y-%m-%d %H:%M:%S UTC"
_RATE_UNITS = ((1e6, "Mbit/s"), (1e3, "kbit/s"), (1.0, "bit/s"))


def _coerce_to_datetime(value: Any) -> Optional[datetime]:
    """Attempt to normalise an epoch (Unix seconds) or ISO label to a UTC datetime."""
    if value in (None, ""):
        return None
    if isinstance(value, datetime):
        return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value, tz=timezone.utc)
    if isinstance(value, str):
        text = value.strip()
        if not text:
            return None
        if text.lstrip("-").isdigit():
            return datetime.fromtimestamp(int(text), tz=timezone.utc)
        try:
            parsed = date_parser.isoparse(text) if "T" in text else date_parser.parse(text)
        except (ValueError, OverflowError):
            return None
        return parsed if parsed.tzinfo else parsed.replace(tzinfo=timezone.utc)
    return None


def format_epoch(value: Any) -> str:
    """Format a session epoch for display or return an empty string."""
    coerced = _coerce_to_datetime(value)
    if coerced is None:
        return "" if value in (None, "") else str(value)
    return coerced.astimezone(timezone.utc).strftime(DISPLAY_DATETIME_FORMAT)


def format_rate(bits_per_s: Optional[float]) -> str:
    """Key rate with an SI prefix; undefined rates render as 'n/a'."""
    if bits_per_s is None or (isinstance(bits_per_s, float) and math.isnan(bits_per_s)):
        return "n/a"
    for scale, unit in _RATE_UNITS:
        if abs(bits_per_s) >= scale:
            return f"{bits_per_s / scale:.2f} {unit}"
    return f"{bits_per_s:.3f} bit/s"


def format_ps(value_ps: float) -> str:
    """Picosecond quantity in the largest unit that keeps it above one."""
    magnitude = abs(value_ps)
    if magnitude >= 1e12:
        return f"{value_ps / 1e12:.3f} s"
    if magnitude >= 1e9:
        return f"{value_ps / 1e9:.3f} ms"
    if magnitude >= 1e6:
        return f"{value_ps / 1e6:.3f} us"
    if magnitude >= 1e3:
        return f"{value_ps / 1e3:.3f} ns"
    return f"{value_ps:.1f} ps"


__all__ = [
    "format_epoch",
    "format_ps",
    "format_rate",
]
