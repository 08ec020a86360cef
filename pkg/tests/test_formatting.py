import math
from datetime import datetime, timezone

import pytest

from timebin.core.formatting import format_epoch, format_ps, format_rate
from timebin.schemas import parse_epoch


@pytest.mark.parametrize(
    "value, expected",
    [
        (0.0, "0.000 bit/s"),
        (0.25, "0.250 bit/s"),
        (12.3456, "12.35 bit/s"),
        (1_500.0, "1.50 kbit/s"),
        (2_000_000.0, "2.00 Mbit/s"),
        (None, "n/a"),
        (math.nan, "n/a"),
    ],
)
def test_format_rate(value, expected):
    assert format_rate(value) == expected


@pytest.mark.parametrize(
    "value, expected",
    [
        (40.0, "40.0 ps"),
        (2_700.0, "2.700 ns"),
        (-100_000_000.0, "-100.000 us"),
        (3e12, "3.000 s"),
    ],
)
def test_format_ps(value, expected):
    assert format_ps(value) == expected


def test_format_epoch_accepts_seconds_and_iso_labels():
    assert format_epoch(1624503600) == "2021-06-24 03:00:00 UTC"
    assert format_epoch("2021-06-24T05:00:00+02:00") == "2021-06-24 03:00:00 UTC"
    assert format_epoch(datetime(2021, 6, 24, 3, tzinfo=timezone.utc)) == "2021-06-24 03:00:00 UTC"


def test_format_epoch_passes_through_unparseable_values():
    assert format_epoch(None) == ""
    assert format_epoch("sunrise") == "sunrise"


@pytest.mark.parametrize(
    "label",
    ["2021-06-24T03:00:00Z", "2021-06-24 05:00:00+02:00", "24 June 2021 03:00", "2021-06-24T03:00"],
)
def test_format_epoch_reads_every_label_the_config_accepts(label):
    assert format_epoch(label) == "2021-06-24 03:00:00 UTC"
    assert format_epoch(parse_epoch(label)) == format_epoch(label)
