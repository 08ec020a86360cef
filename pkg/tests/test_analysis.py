import math

import numpy as np
import pandas as pd
import pytest

from timebin.core.analysis import (
    AnalysisResult,
    SubspaceStats,
    analyze_blocks,
    best_dimension_frame,
    binary_entropy,
    key_fraction,
    key_rate,
    optimize_dimension,
    p_match_toa,
    p_match_tsup,
    results_frame,
    subspace_stats,
    witness,
)
from timebin.core.discretize import Block, CorrelationMatrices, DiscretizationConfig, FrameStats
from timebin.core.errors import ConfigError, EntropyDomainError
from timebin.core.simulator import simulate_session
from timebin.core.timetag import PS_PER_S
from timebin.schemas import AnalysisConfig, ChannelConfig, SourceConfig

DIMENSIONS = (4, 6, 12, 18, 36)
SIGMAS = 4


def _make_matrices(toa, tsup, d=4, integration_s=1.0, scale=1):
    """Matrices whose subspace ``i`` holds ``toa[i]`` and ``tsup[i]`` quadruples."""

    half = d // 2
    m_toa = np.zeros((d, d), dtype=np.int64)
    m_tsup = np.zeros((2, 2, d, d), dtype=np.int64)
    for i in range(half):
        j = i + half
        ii, ij, ji, jj = toa[i]
        m_toa[i, i], m_toa[i, j], m_toa[j, i], m_toa[j, j] = ii, ij, ji, jj
        pp, pm, mp, mm = tsup[i]
        m_tsup[0, 0, i, i], m_tsup[0, 1, i, i], m_tsup[1, 0, i, i], m_tsup[1, 1, i, i] = pp, pm, mp, mm
    accepted = int(m_toa.sum() + m_tsup.sum()) * scale
    stats = FrameStats(total=accepted, empty=0, single_sided=0, valid=accepted, mixed_basis=0, multi_resolved=0)
    return CorrelationMatrices(
        cfg=DiscretizationConfig.for_dimension(d),
        m_toa=m_toa * scale,
        m_tsup=m_tsup * scale,
        frame_stats=stats,
        integration_s=integration_s,
    )


def _perfect_session(perfect_source, quiet_channel, duration_s=10.0):
    source = perfect_source.model_copy(update={"pair_rate_hz": 250.0})
    return simulate_session(source, quiet_channel, duration_s=duration_s, seed=17)


def test_p_match_examples():
    assert p_match_toa((50, 0, 0, 50)) == 1.0
    assert p_match_toa((25, 25, 25, 25)) == 0.5
    assert p_match_tsup((90, 5, 5, 100)) == pytest.approx(0.95)


def test_p_match_undefined_without_counts():
    assert p_match_toa((0, 0, 0, 0)) is None
    assert p_match_tsup((0, 0, 0, 0)) is None


def test_binary_entropy_values():
    assert binary_entropy(0.5) == pytest.approx(1.0)
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.95) == pytest.approx(0.28640, abs=1e-5)


def test_binary_entropy_is_symmetric():
    p = np.linspace(0.0, 1.0, 21)

    assert np.allclose(binary_entropy(p), binary_entropy(1.0 - p))


@pytest.mark.parametrize("p", [-0.1, 1.2, math.nan])
def test_binary_entropy_rejects_out_of_domain(p):
    with pytest.raises(EntropyDomainError):
        binary_entropy(p)


def test_key_fraction_at_ninety_five_percent():
    stats = SubspaceStats.from_counts(0, (95, 5, 0, 0), (90, 5, 5, 100))

    fraction = key_fraction(stats)

    assert stats.p_toa == pytest.approx(0.95)
    assert fraction.raw == pytest.approx(0.42720, abs=1e-5)
    assert fraction.usable == fraction.raw


def test_key_fraction_is_clamped_for_use():
    stats = SubspaceStats.from_counts(0, (25, 25, 25, 25), (25, 25, 25, 25))

    fraction = key_fraction(stats)

    assert fraction.raw == pytest.approx(-1.0)
    assert fraction.usable == 0.0


def test_key_fraction_undefined_subspace():
    assert key_fraction(SubspaceStats.from_counts(0, (10, 0, 0, 10), (0, 0, 0, 0))) is None


def test_anti_correlated_subspace_gives_no_usable_key():
    stats = SubspaceStats.from_counts(0, (0, 50, 50, 0), (2, 48, 48, 2))

    fraction = key_fraction(stats)

    assert stats.witness == pytest.approx(0.04)
    assert fraction.raw > 0.7
    assert fraction.usable == 0.0


def test_uncertified_block_has_zero_rate():
    # one clean subspace, one with flipped signs in both bases
    m = _make_matrices([(50, 0, 0, 50), (0, 50, 50, 0)], [(50, 0, 0, 50), (0, 50, 50, 0)])

    result = key_rate(m)

    assert result.witness_avg == pytest.approx(1.0)
    assert result.key_fraction_raw_avg == pytest.approx(1.0)
    assert result.key_fraction_avg == 0.0
    assert result.key_rate == 0.0
    assert not result.key_positive


def test_subspace_stats_carry_standard_errors():
    stats = SubspaceStats.from_counts(0, (90, 5, 5, 100), (50, 0, 0, 50))

    assert stats.stderr_toa == pytest.approx(math.sqrt(0.95 * 0.05 / 200))
    assert stats.stderr_tsup == 0.0
    assert stats.coincidences == 300


def test_witness_perfect_and_random():
    perfect = _make_matrices([(50, 0, 0, 50)] * 2, [(50, 0, 0, 50)] * 2)
    random = _make_matrices([(25, 25, 25, 25)] * 2, [(25, 25, 25, 25)] * 2)

    assert witness(perfect)[0] == pytest.approx(2.0)
    assert witness(random)[0] == pytest.approx(1.0)


def test_witness_skips_undefined_subspaces():
    m = _make_matrices([(50, 0, 0, 50), (0, 0, 0, 0)], [(40, 10, 10, 40), (0, 0, 0, 0)])

    average, per_subspace = witness(m)

    assert average == pytest.approx(1.8)
    assert per_subspace[1] is None


def test_witness_is_none_without_counts():
    m = _make_matrices([(0, 0, 0, 0)] * 2, [(0, 0, 0, 0)] * 2)

    result = key_rate(m)

    assert witness(m)[0] is None
    assert result.key_rate is None
    assert not result.witness_certified
    assert not result.key_positive
    assert result.undefined_subspaces == 2


def test_witness_and_fraction_are_scale_invariant():
    toa = [(90, 5, 5, 100), (40, 3, 2, 45)]
    tsup = [(45, 2, 3, 50), (30, 4, 1, 35)]
    base = key_rate(_make_matrices(toa, tsup))
    scaled = key_rate(_make_matrices(toa, tsup, scale=7))

    assert scaled.witness_avg == pytest.approx(base.witness_avg)
    assert scaled.key_fraction_avg == pytest.approx(base.key_fraction_avg)
    assert scaled.key_rate == pytest.approx(7 * base.key_rate)


def test_witness_threshold_is_strict():
    result = AnalysisResult(
        block_id=0,
        d=4,
        integration_s=1.0,
        witness_avg=1.5,
        witness_per_subspace=[1.5, 1.5],
        key_fraction_avg=0.0,
        key_fraction_raw_avg=-0.2,
        key_rate=0.0,
        subspace_coincidences=10,
    )

    assert not result.witness_certified
    assert not result.key_positive


def test_key_rate_weightings():
    toa = [(50, 0, 0, 50), (30, 10, 10, 30)]
    tsup = [(50, 0, 0, 50), (30, 10, 10, 30)]
    m = _make_matrices(toa, tsup, integration_s=2.0)

    uniform = key_rate(m, "uniform")
    weighted = key_rate(m, "coincidences")

    assert uniform.subspace_coincidences == 360
    assert uniform.witness_avg == pytest.approx(1.75)
    assert uniform.key_fraction_avg == pytest.approx(0.5)
    assert uniform.key_rate == pytest.approx(90.0)
    assert weighted.key_fraction_avg == pytest.approx(200 / 360)
    assert weighted.key_rate == pytest.approx(100.0)
    # second subspace: 1 - 2 H(0.75)
    assert uniform.key_fraction_raw_avg == pytest.approx((1.0 + 1.0 - 2 * 0.811278) / 2, abs=1e-5)


def test_key_rate_rejects_unknown_weighting():
    m = _make_matrices([(1, 0, 0, 1)] * 2, [(1, 0, 0, 1)] * 2)

    with pytest.raises(ConfigError):
        key_rate(m, "squared")


def test_report_row_has_every_column():
    m = _make_matrices([(50, 0, 0, 50)] * 2, [(50, 0, 0, 50)] * 2)

    row = key_rate(m, block_start_s=200.0).to_row()

    assert row["block_start_s"] == 200.0
    assert row["witness_certified"] is True
    assert row["key_rate_bps"] == pytest.approx(400.0)
    assert list(results_frame([]).columns) == list(row)


def test_subspace_stats_need_even_dimension():
    cfg = DiscretizationConfig.for_dimension(3, frame_len_ps=8_100)
    m = CorrelationMatrices(
        cfg=cfg,
        m_toa=np.zeros((3, 3), dtype=np.int64),
        m_tsup=np.zeros((2, 2, 3, 3), dtype=np.int64),
        frame_stats=FrameStats(0, 0, 0, 0, 0, 0),
        integration_s=1.0,
    )

    with pytest.raises(ConfigError):
        subspace_stats(m)


def test_perfect_session_scan_prefers_smaller_dimension(perfect_source, quiet_channel):
    session = _perfect_session(perfect_source, quiet_channel)
    block = Block(0, 0, 10 * PS_PER_S // 5_400 * 5_400)

    scan = optimize_dimension(session.alice, session.bob, block, DIMENSIONS)

    for d in DIMENSIONS:
        result = scan.results[d]
        assert result.witness_avg == pytest.approx(2.0)
        assert result.key_fraction_avg == pytest.approx(1.0)
        assert result.undefined_subspaces == 0
    rates = [scan.results[d].key_rate for d in DIMENSIONS]
    assert rates == pytest.approx([rates[0]] * len(DIMENSIONS))
    assert scan.best_d == 4


def test_single_candidate_scan(perfect_source, quiet_channel):
    session = _perfect_session(perfect_source, quiet_channel, duration_s=2.0)
    block = Block(0, 0, 2 * PS_PER_S // 5_400 * 5_400)

    scan = optimize_dimension(session.alice, session.bob, block, [6])

    assert list(scan.results) == [6]
    assert scan.best_d == 6


def test_no_positive_rate_leaves_best_unset(tiny_streams):
    alice, bob = tiny_streams

    scan = optimize_dimension(alice, bob, Block(0, 0, 4 * 5_400), [4, 12])

    assert scan.best_d is None


def test_analyze_blocks_is_reproducible(perfect_source, quiet_channel):
    session = _perfect_session(perfect_source, quiet_channel, duration_s=4.0)
    config = AnalysisConfig(d_list=[4, 12], block_len_s=1.0, grid_phase_ps=0)

    first = results_frame(analyze_blocks(session.alice, session.bob, config, seed=5))
    second = results_frame(analyze_blocks(session.alice, session.bob, config, seed=5, threads=2))

    assert len(first) == 2 * first["block_id"].nunique()
    assert first["block_id"].nunique() >= 3
    pd.testing.assert_frame_equal(first, second)


def test_best_dimension_ties_go_to_smaller_d():
    report = pd.DataFrame(
        {
            "block_id": [0, 0, 0, 1, 1],
            "block_start_s": [0.0, 0.0, 0.0, 200.0, 200.0],
            "d": [4, 6, 12, 4, 6],
            "key_rate_bps": [5.0, 5.0, 3.0, None, 0.0],
            "witness_avg": [1.9, 1.8, 1.7, None, 1.2],
        }
    )

    best = best_dimension_frame(report)

    assert best["best_d"].iloc[0] == 4
    assert best["key_rate_bps"].iloc[0] == 5.0
    assert pd.isna(best["best_d"].iloc[1])
    assert best["key_rate_bps"].iloc[1] == 0.0
    assert str(best["best_d"].dtype) == "Int64"


def _bright_session(source, channel, duration_s, seed):
    session = simulate_session(source, channel, duration_s=duration_s, seed=seed)
    block = Block(0, 0, int(duration_s * PS_PER_S) // 5_400 * 5_400)
    return session, block


def test_fully_dephased_source_sits_at_classical_bound(quiet_channel):
    # TOA visibility 0.5 leaves a coin flip between matching and opposite slots
    source = SourceConfig(pair_rate_hz=100_000.0, tsup_visibility=0.0, toa_visibility=0.5)
    session, block = _bright_session(source, quiet_channel, 1.0, seed=31)

    result = optimize_dimension(session.alice, session.bob, block, [4]).results[4]

    assert result.witness_avg == pytest.approx(1.0, abs=0.03)
    assert not result.witness_certified
    assert result.key_rate == 0.0


def test_tsup_visibility_point_nine_with_clean_toa(quiet_channel):
    source = SourceConfig(pair_rate_hz=100_000.0, tsup_visibility=0.9, toa_visibility=1.0)
    session, block = _bright_session(source, quiet_channel, 1.0, seed=32)

    result = optimize_dimension(session.alice, session.bob, block, [4]).results[4]

    assert result.witness_avg == pytest.approx(1.95, abs=0.01)
    assert result.witness_certified
    assert result.key_positive


@pytest.mark.parametrize("d", [4, 36])
def test_toa_visibility_sets_in_frame_match(quiet_channel, d):
    source = SourceConfig(pair_rate_hz=100_000.0, tsup_visibility=1.0, toa_visibility=0.8)
    session, block = _bright_session(source, quiet_channel, 1.0, seed=33)

    result = optimize_dimension(session.alice, session.bob, block, [d]).results[d]

    n_toa = sum(s.n_toa for s in result.subspaces)
    p_toa = sum(s.p_toa * s.n_toa for s in result.subspaces) / n_toa
    assert p_toa == pytest.approx(0.8, abs=SIGMAS * math.sqrt(0.16 / n_toa))


def test_flipped_phase_reports_raw_key_but_no_usable_key(quiet_channel):
    source = SourceConfig(pair_rate_hz=100_000.0, tsup_visibility=0.9, toa_visibility=0.99, phase_rad=math.pi)
    session, block = _bright_session(source, quiet_channel, 1.0, seed=34)

    result = optimize_dimension(session.alice, session.bob, block, [4]).results[4]

    # p_tsup near 0.05: the bound alone would read about 0.63
    assert result.witness_avg == pytest.approx(1.04, abs=0.02)
    assert result.key_fraction_raw_avg == pytest.approx(0.63, abs=0.05)
    assert result.key_fraction_avg == 0.0
    assert result.key_rate == 0.0


@pytest.mark.parametrize("visibility", [0.5, 0.9, 1.0])
@pytest.mark.parametrize("phase", [0.0, math.pi / 2, math.pi])
def test_positive_key_implies_certified_witness(quiet_channel, visibility, phase):
    source = SourceConfig(pair_rate_hz=20_000.0, tsup_visibility=visibility, toa_visibility=0.99, phase_rad=phase)
    session, block = _bright_session(source, quiet_channel, 1.0, seed=35)

    scan = optimize_dimension(session.alice, session.bob, block, [4, 12])

    for result in scan.results.values():
        if result.key_positive:
            assert result.witness_certified
        for s, value in zip(result.subspaces, result.witness_per_subspace):
            if key_fraction(s).usable > 0:
                assert value > 1.5


@pytest.mark.slow
def test_noisy_block_trades_coincidences_for_key_fraction():
    """Same noisy block at every d: fewer subspace coincidences, more key per coincidence."""

    source = SourceConfig(pair_rate_hz=1_000_000.0, tsup_visibility=0.9, toa_visibility=0.99)
    channel = ChannelConfig(
        loss_alice_db=1.5,
        loss_bob_db=1.5,
        jitter_sigma_ps=40.0,
        background_alice=1_690_000.0,
        background_bob=1_690_000.0,
        dark_rate_hz=0.0,
        clock_offset_ps=0,
        clock_drift_ps_per_s=0.0,
        drift_noise_ps_per_sqrt_s=0.0,
    )
    session, block = _bright_session(source, channel, 0.2, seed=36)

    scan = optimize_dimension(session.alice, session.bob, block, DIMENSIONS)

    fractions = [scan.results[d].key_fraction_avg for d in DIMENSIONS]
    coincidences = [scan.results[d].subspace_coincidences for d in DIMENSIONS]
    assert all(later >= earlier for earlier, later in zip(fractions, fractions[1:]))
    assert all(later <= earlier for earlier, later in zip(coincidences, coincidences[1:]))
    assert fractions[-1] > fractions[0]
