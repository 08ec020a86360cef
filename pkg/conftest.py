import pytest

from timebin.core.timetag import DetectorChannel, Party, TagStream
from timebin.schemas import ChannelConfig, SourceConfig


@pytest.fixture
def perfect_source():
    """Ideal source: perfect visibility in both bases, locked phase, low rate."""
    return SourceConfig(pair_rate_hz=10.0, tsup_visibility=1.0, toa_visibility=1.0, phase_rad=0.0)


@pytest.fixture
def quiet_channel():
    """Lossless link with no noise, no jitter and an ideal clock."""
    return ChannelConfig(
        loss_alice_db=0.0,
        loss_bob_db=0.0,
        jitter_sigma_ps=0.0,
        background_bob=0.0,
        background_alice=0.0,
        dark_rate_hz=0.0,
        clock_offset_ps=0,
        clock_drift_ps_per_s=0.0,
        drift_noise_ps_per_sqrt_s=0.0,
    )


@pytest.fixture
def tiny_streams():
    """Two hand-checkable streams: three pairs, one Bob-only background click."""
    alice = TagStream.from_tags(
        Party.ALICE,
        [
            (DetectorChannel.TOA_H, 1_000),
            (DetectorChannel.TSUP_PLUS, 7_000),
            (DetectorChannel.TOA_V, 12_000),
        ],
    )
    bob = TagStream.from_tags(
        Party.BOB,
        [
            (DetectorChannel.TOA_H, 1_000),
            (DetectorChannel.TSUP_PLUS, 7_000),
            (DetectorChannel.TOA_V, 12_000),
            (DetectorChannel.TSUP_MINUS, 20_000),
        ],
    )
    return alice, bob


@pytest.fixture
def tmp_run_root(tmp_path):
    return tmp_path / "runs"


QUICK_SCENARIO = """\
[scenario]
name = quick

[source]
pair_rate_hz = 5000

[channel]
loss_alice_db = 3
loss_bob_db = 10
background_bob = 200
dark_rate_hz = 100
clock_offset_ps = 100000000
clock_drift_ps_per_s = 30
drift_noise_ps_per_sqrt_s = 1

[session]
duration_s = 20
seed = 3
chunk_s = 5

[sync]
block_len_s = 5

[analysis]
d_list = 4, 36
block_len_s = 10
n_phases = 4
"""


@pytest.fixture
def quick_scenario(tmp_path):
    """Bright 20 s scenario: two analysis blocks, four sync blocks."""
    path = tmp_path / "quick.cfg"
    path.write_text(QUICK_SCENARIO, encoding="utf-8")
    return path


@pytest.fixture
def dark_scenario(tmp_path):
    """Same link with no usable pairs; drift tracking cannot lock."""
    path = tmp_path / "dark.cfg"
    path.write_text(
        QUICK_SCENARIO.replace("name = quick", "name = dark").replace("pair_rate_hz = 5000", "pair_rate_hz = 0.001"),
        encoding="utf-8",
    )
    return path
