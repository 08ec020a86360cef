from __future__ import annotations

from pathlib import Path

import pytest

from timebin.core.errors import ConfigError
from timebin.importers.scenario import load_scenario, parse_scenario_text, scenario_from_snapshot
from timebin.schemas import DEFAULT_DIMENSIONS, ChannelConfig, Profile, ScenarioConfig

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def test_missing_sections_take_defaults():
    config = parse_scenario_text("[scenario]\nname = bare\n")

    assert config.name == "bare"
    assert config.channel.loss_bob_db == 25.0
    assert config.analysis.d_list == list(DEFAULT_DIMENSIONS)
    assert config.analysis.grid_phase_ps == "auto"
    assert config.session.epoch == 1624503600


def test_aliases_and_profiles_are_resolved():
    config = parse_scenario_text(
        "[source]\npair_rate = 1000\n"
        "[channel]\nbackground = 0:100, 600:4000\ndark_hz = 50\noffset_ps = 2500\n"
        "[session]\nduration = 30\n"
        "[analysis]\ndimensions = 36, 4\ngrid_phase_ps = 120\n"
    )

    assert config.source.pair_rate_hz == 1000.0
    assert config.channel.background_bob == Profile(knots=[(0.0, 100.0), (600.0, 4000.0)])
    assert config.channel.background_bob(300.0) == pytest.approx(2050.0)
    assert config.channel.dark_rate_hz == 50.0
    assert config.session.duration_s == 30.0
    assert config.analysis.d_list == [4, 36]
    assert config.analysis.grid_phase_ps == 120


def test_epoch_accepts_iso_and_unix_seconds():
    iso = parse_scenario_text("[session]\nepoch = 2021-06-24T03:00:00Z\n")
    unix = parse_scenario_text("[session]\nepoch = 1624503600\n")

    assert iso.session.epoch == unix.session.epoch == 1624503600


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_scenario_text("[weather]\nrain = yes\n")


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="channel.fog"):
        parse_scenario_text("[channel]\nfog = 3\n")


def test_invalid_value_names_the_field():
    with pytest.raises(ConfigError) as excinfo:
        parse_scenario_text("[session]\nduration_s = 0\n")

    assert "session.duration_s" in str(excinfo.value)


def test_malformed_profile_is_rejected():
    with pytest.raises(ConfigError):
        parse_scenario_text("[channel]\nbackground_bob = 0:100, 50\n")


def test_sync_windows_must_be_whole_bins():
    with pytest.raises(ConfigError, match="coarse_window_ps"):
        parse_scenario_text("[sync]\ncoarse_window_ps = 1500\n")


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_scenario(tmp_path / "absent.cfg")


def test_sync_prior_defaults_to_nominal_offset():
    nominal = parse_scenario_text("[channel]\nclock_offset_ps = 4000\n")
    explicit = parse_scenario_text("[channel]\nclock_offset_ps = 4000\n[sync]\ninitial_offset_ps = 0\n")

    assert nominal.sync_prior_ps == 4000
    assert explicit.sync_prior_ps == 0


def test_snapshot_round_trip(quick_scenario):
    config = load_scenario(quick_scenario)

    assert scenario_from_snapshot(config.model_dump(mode="json")) == config


def test_with_seed_and_background_scale():
    config = ScenarioConfig(channel=ChannelConfig(background_alice=500.0, dark_rate_hz=200.0))

    scaled = config.with_seed(9).with_background_scale(2.0)

    assert scaled.session.seed == 9
    assert scaled.channel.background_bob(0.0) == pytest.approx(3000.0)
    assert scaled.channel.background_alice(0.0) == pytest.approx(1000.0)
    assert scaled.channel.dark_rate_hz == 200.0
    assert config.with_seed(None) is config


@pytest.mark.parametrize("name", ["night", "sunrise_ramp", "rain_burst", "day_extreme"])
def test_bundled_scenarios_load(name):
    config = load_scenario(SCENARIO_DIR / f"{name}.cfg")

    assert config.name == name
    blocks = config.session.duration_s / config.analysis.block_len_s
    assert blocks == pytest.approx(round(blocks))
    assert round(blocks) >= 3
    assert config.session.duration_s / config.sync.block_len_s >= 2
