"""Monte Carlo generator of Alice/Bob tag streams from the energy-time entangled state.

Pairs are created as a homogeneous Poisson process. Each photon picks a
measurement module at its 50:50 beamsplitter, the joint outcome follows the
discretized state statistics, the link thins each arm independently, and
background/dark clicks plus Bob's clock error are layered on top.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from timebin.core.discretize import DEFAULT_TAU_MZI_PS
from timebin.core.rng import SeededRNG
from timebin.core.timetag import PS_PER_S, Basis, DetectorChannel, Party, TagStream
from timebin.schemas import ChannelConfig, Profile, SourceConfig

logger = logging.getLogger(__name__)

ALL_CHANNELS: Tuple[DetectorChannel, ...] = tuple(DetectorChannel)
CLOCK_GRID_S = 1.0


class Provenance(IntEnum):
    SIGNAL = 0
    BACKGROUND = 1
    DARK = 2


@dataclass(frozen=True)
class PairOutcome:
    """Joint outcome of one pair before loss, jitter and clock error."""

    channel_a: DetectorChannel
    channel_b: DetectorChannel
    time_a_ps: int
    time_b_ps: int


def tsup_match_probability(source: SourceConfig) -> float:
    """Probability that both TSUP detectors report the same sign."""

    return (1.0 + source.tsup_visibility * math.cos(source.phase_rad)) / 2.0


def toa_error_probability(source: SourceConfig) -> float:
    """Chance that a TOA/TOA pair lands in opposite time slots.

    Half of the slot errors leave Alice's frame, so the in-frame match
    fraction equals ``toa_visibility`` only if errors are drawn at
    ``2 (1 - v) / (2 - v)``.
    """

    v = source.toa_visibility
    return 2.0 * (1.0 - v) / (2.0 - v)


class PairCodes(NamedTuple):
    channel_a: np.ndarray
    channel_b: np.ndarray
    # Bob's time-slot shift in units of tau_MZI: -1, 0 or +1.
    slot_shift_b: np.ndarray


def sample_pair_outcomes(
    basis_a: np.ndarray,
    basis_b: np.ndarray,
    source: SourceConfig,
    rng: np.random.Generator,
) -> PairCodes:
    """Vectorised joint outcomes; bases are 0 (TOA) / 1 (TSUP) codes.

    Channel codes follow ``2 * basis + bit`` so the low bit is the polarization
    (TOA) or the sign (TSUP, 0 = plus). A TOA/TOA slot error moves Bob's photon
    one ``tau_MZI`` early or late and flips its polarization label.
    """

    basis_a = np.asarray(basis_a, dtype=np.uint8)
    basis_b = np.asarray(basis_b, dtype=np.uint8)
    n = basis_a.size
    u_match = rng.random(n)
    bit_a = rng.integers(0, 2, n, dtype=np.uint8)
    bit_b_free = rng.integers(0, 2, n, dtype=np.uint8)
    shift_sign = np.where(rng.random(n) < 0.5, -1, 1).astype(np.int8)

    p_match = np.where(basis_a == 0, 1.0 - toa_error_probability(source), tsup_match_probability(source))
    matched_basis = basis_a == basis_b
    mismatch = matched_basis & (u_match >= p_match)
    bit_b = np.where(matched_basis, np.where(mismatch, bit_a ^ 1, bit_a), bit_b_free)
    slot_shift = np.where(mismatch & (basis_a == 0), shift_sign, 0).astype(np.int8)
    return PairCodes(
        (2 * basis_a + bit_a).astype(np.uint8),
        (2 * basis_b + bit_b).astype(np.uint8),
        slot_shift,
    )


def sample_pair_outcome(
    bases: Tuple[Basis, Basis],
    source: SourceConfig,
    creation_time: int,
    rng: np.random.Generator,
    tau_mzi_ps: int = DEFAULT_TAU_MZI_PS,
) -> PairOutcome:
    """Draw one pair's outcome. Both photons carry the creation time (early-slot convention)
    unless a TOA slot error moves Bob's photon by ``tau_mzi_ps``."""

    codes = [0 if basis is Basis.TOA else 1 for basis in bases]
    ch_a, ch_b, shift = sample_pair_outcomes(np.array([codes[0]]), np.array([codes[1]]), source, rng)
    return PairOutcome(
        channel_a=DetectorChannel(int(ch_a[0])),
        channel_b=DetectorChannel(int(ch_b[0])),
        time_a_ps=int(creation_time),
        time_b_ps=int(creation_time) + int(shift[0]) * int(tau_mzi_ps),
    )


def _background_times(
    profile: Profile,
    duration_s: float,
    rng: np.random.Generator,
    start_s: float = 0.0,
) -> np.ndarray:
    """Inhomogeneous Poisson arrival times (ps) for one detector, by thinning."""

    peak = profile.peak(start_s, start_s + duration_s)
    if peak <= 0:
        return np.empty(0, dtype=np.int64)
    n_candidates = rng.poisson(peak * duration_s)
    times_s = start_s + rng.random(n_candidates) * duration_s
    keep = rng.random(n_candidates) * peak < profile(times_s)
    return np.floor(times_s[keep] * PS_PER_S).astype(np.int64)


def generate_background(
    profile: Profile,
    party: Party,
    channels: Sequence[DetectorChannel],
    duration_s: float,
    rng: np.random.Generator,
    start_s: float = 0.0,
    epoch: int = 0,
) -> TagStream:
    """Uncorrelated clicks at ``profile(t)`` Hz on each of ``channels``."""

    times: List[np.ndarray] = []
    codes: List[np.ndarray] = []
    for channel in channels:
        channel_times = _background_times(profile, duration_s, rng, start_s)
        times.append(channel_times)
        codes.append(np.full(channel_times.size, int(channel), dtype=np.uint8))
    if not times:
        return TagStream.empty(party, epoch)
    stream, _ = TagStream.from_unsorted(
        party, np.concatenate(times), np.concatenate(codes), epoch, drop_duplicates=True
    )
    return stream


@dataclass(frozen=True)
class ClockTrajectory:
    """Bob-minus-Alice clock offset sampled on a regular grid (linear in between)."""

    grid_s: np.ndarray
    offset_ps: np.ndarray

    def __call__(self, t_ps: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(t_ps, dtype=float) / PS_PER_S, self.grid_s, self.offset_ps)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_s": self.grid_s, "offset_ps": self.offset_ps})


def draw_clock_trajectory(channel: ChannelConfig, duration_s: float, rng: np.random.Generator) -> ClockTrajectory:
    """Offset + linear drift + Wiener random walk over ``[0, duration_s]``."""

    n_steps = max(1, int(math.ceil(duration_s / CLOCK_GRID_S)))
    grid_s = np.arange(n_steps + 1, dtype=float) * CLOCK_GRID_S
    steps = rng.normal(0.0, channel.drift_noise_ps_per_sqrt_s * math.sqrt(CLOCK_GRID_S), n_steps)
    walk = np.concatenate([[0.0], np.cumsum(steps)])
    offsets = channel.clock_offset_ps + channel.clock_drift_ps_per_s * grid_s + walk
    return ClockTrajectory(grid_s=grid_s, offset_ps=offsets)


def _shift_by_trajectory(stream: TagStream, trajectory: ClockTrajectory) -> Tuple[TagStream, np.ndarray]:
    shifted = stream.timestamps + np.rint(trajectory(stream.timestamps)).astype(np.int64)
    keep = np.flatnonzero(shifted >= 0)
    if keep.size < len(stream):
        logger.warning("Clock shift moved %d tags before the epoch; dropped.", len(stream) - keep.size)
    moved, order = TagStream.from_unsorted(
        stream.party, shifted[keep], stream.channels[keep], stream.epoch, drop_duplicates=True
    )
    return moved, keep[order]


def apply_clock(stream: TagStream, channel: ChannelConfig, rng: np.random.Generator) -> TagStream:
    """Map Bob's true times onto his free-running clock: t + offset + drift*t + walk(t)."""

    _, last = stream.span
    trajectory = draw_clock_trajectory(channel, max(last / PS_PER_S, CLOCK_GRID_S), rng)
    moved, _ = _shift_by_trajectory(stream, trajectory)
    return moved


@dataclass
class GroundTruth:
    """What really happened in a simulated session, for oracle tests and diagnostics."""

    pairs: pd.DataFrame
    alice_provenance: np.ndarray
    alice_pair_index: np.ndarray
    bob_provenance: np.ndarray
    bob_pair_index: np.ndarray
    bob_true_ps: np.ndarray
    clock: ClockTrajectory
    dropped: Dict[str, int] = field(default_factory=dict)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def true_offset_ps(self, t_ps: np.ndarray) -> np.ndarray:
        """Bob-minus-Alice clock offset at Bob's true times ``t_ps``."""

        return self.clock(t_ps)

    def both_detected(self) -> int:
        return int((self.pairs["detected_a"] & self.pairs["detected_b"]).sum())

    def write(self, directory: Path) -> Dict[str, Path]:
        directory.mkdir(parents=True, exist_ok=True)
        files = {
            "pairs": directory / "ground_truth_pairs.csv",
            "clock": directory / "ground_truth_clock.csv",
            "tags_alice": directory / "ground_truth_tags_alice.csv",
            "tags_bob": directory / "ground_truth_tags_bob.csv",
        }
        self.pairs.to_csv(files["pairs"], index=False, lineterminator="\n")
        self.clock.to_frame().to_csv(files["clock"], index=False, lineterminator="\n", float_format="%.6f")
        pd.DataFrame(
            {"provenance": self.alice_provenance, "pair_index": self.alice_pair_index}
        ).to_csv(files["tags_alice"], index=False, lineterminator="\n")
        pd.DataFrame(
            {
                "provenance": self.bob_provenance,
                "pair_index": self.bob_pair_index,
                "true_timestamp_ps": self.bob_true_ps,
            }
        ).to_csv(files["tags_bob"], index=False, lineterminator="\n")
        return files


class SimulatedSession(NamedTuple):
    alice: TagStream
    bob: TagStream
    truth: GroundTruth


@dataclass
class _Chunk:
    creation_ps: np.ndarray
    basis_a: np.ndarray
    basis_b: np.ndarray
    channel_a: np.ndarray
    channel_b: np.ndarray
    detected_a: np.ndarray
    detected_b: np.ndarray
    jitter_a: np.ndarray
    jitter_b: np.ndarray
    slot_shift_b: np.ndarray
    noise: Dict[Tuple[Party, Provenance], TagStream]


def _simulate_chunk(
    index: int,
    start_s: float,
    length_s: float,
    source: SourceConfig,
    channel: ChannelConfig,
    root: SeededRNG,
    epoch: int,
) -> _Chunk:
    rng = root.substream("pairs", index)
    n_pairs = int(rng.poisson(source.pair_rate_hz * length_s))
    start_ps = int(round(start_s * PS_PER_S))
    length_ps = max(1, int(round(length_s * PS_PER_S)))
    creation = start_ps + np.sort(rng.integers(0, length_ps, n_pairs, dtype=np.int64))
    basis_a = rng.integers(0, 2, n_pairs, dtype=np.uint8)
    basis_b = rng.integers(0, 2, n_pairs, dtype=np.uint8)
    channel_a, channel_b, slot_shift_b = sample_pair_outcomes(
        basis_a, basis_b, source, root.substream("outcomes", index)
    )

    loss_rng = root.substream("loss", index)
    detected_a = loss_rng.random(n_pairs) < channel.transmission_alice()
    detected_b = loss_rng.random(n_pairs) < channel.transmission_bob(creation / PS_PER_S)

    jitter_rng = root.substream("jitter", index)
    sigma = channel.jitter_sigma_ps
    jitter_a = np.rint(jitter_rng.normal(0.0, sigma, n_pairs)).astype(np.int64) if sigma else np.zeros(n_pairs, np.int64)
    jitter_b = np.rint(jitter_rng.normal(0.0, sigma, n_pairs)).astype(np.int64) if sigma else np.zeros(n_pairs, np.int64)

    dark = Profile(knots=[(0.0, channel.dark_rate_hz)])
    noise = {}
    for party, profile in ((Party.ALICE, channel.background_alice), (Party.BOB, channel.background_bob)):
        noise[(party, Provenance.BACKGROUND)] = generate_background(
            profile, party, ALL_CHANNELS, length_s, root.substream("background", party.value, index), start_s, epoch
        )
        noise[(party, Provenance.DARK)] = generate_background(
            dark, party, ALL_CHANNELS, length_s, root.substream("dark", party.value, index), start_s, epoch
        )
    return _Chunk(
        creation, basis_a, basis_b, channel_a, channel_b, detected_a, detected_b, jitter_a, jitter_b, slot_shift_b, noise
    )


def _assemble_party(
    party: Party,
    signal_ps: np.ndarray,
    signal_channels: np.ndarray,
    signal_pairs: np.ndarray,
    noise: Sequence[Tuple[Provenance, TagStream]],
    duration_ps: int,
    epoch: int,
    dropped: Dict[str, int],
) -> Tuple[TagStream, np.ndarray, np.ndarray]:
    times = [signal_ps] + [stream.timestamps for _, stream in noise]
    codes = [signal_channels] + [stream.channels for _, stream in noise]
    provenance = [np.full(signal_ps.size, Provenance.SIGNAL, dtype=np.int8)] + [
        np.full(len(stream), kind, dtype=np.int8) for kind, stream in noise
    ]
    pair_index = [signal_pairs] + [np.full(len(stream), -1, dtype=np.int64) for _, stream in noise]

    all_times = np.concatenate(times)
    in_session = (all_times >= 0) & (all_times < duration_ps)
    dropped[f"out_of_session_{party.value}"] = int((~in_session).sum())
    keep = np.flatnonzero(in_session)
    stream, order = TagStream.from_unsorted(
        party, all_times[keep], np.concatenate(codes)[keep], epoch, drop_duplicates=True
    )
    dropped[f"duplicates_{party.value}"] = int(keep.size - order.size)
    picked = keep[order]
    return stream, np.concatenate(provenance)[picked], np.concatenate(pair_index)[picked]


def simulate_session(
    source: SourceConfig,
    channel: ChannelConfig,
    duration_s: float,
    seed: int,
    epoch: int = 0,
    chunk_s: float = 50.0,
    threads: int = 1,
    tau_mzi_ps: int = DEFAULT_TAU_MZI_PS,
) -> SimulatedSession:
    """Generate both parties' tag streams plus the ground truth behind them.

    ``tau_mzi_ps`` is the slot separation a TOA error moves Bob's photon by.
    """

    if duration_s <= 0:
        raise ValueError("duration_s must be positive.")
    root = SeededRNG(seed)
    n_chunks = max(1, int(math.ceil(duration_s / chunk_s)))
    bounds = [(i * chunk_s, min(chunk_s, duration_s - i * chunk_s)) for i in range(n_chunks)]
    chunks: List[_Chunk] = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_simulate_chunk)(i, start, length, source, channel, root, epoch)
        for i, (start, length) in enumerate(bounds)
    )

    creation = np.concatenate([chunk.creation_ps for chunk in chunks])
    channel_a = np.concatenate([chunk.channel_a for chunk in chunks])
    channel_b = np.concatenate([chunk.channel_b for chunk in chunks])
    detected_a = np.concatenate([chunk.detected_a for chunk in chunks])
    detected_b = np.concatenate([chunk.detected_b for chunk in chunks])
    jitter_a = np.concatenate([chunk.jitter_a for chunk in chunks])
    jitter_b = np.concatenate([chunk.jitter_b for chunk in chunks])
    shift_b = np.concatenate([chunk.slot_shift_b for chunk in chunks]).astype(np.int64) * int(tau_mzi_ps)
    pair_index = np.arange(creation.size, dtype=np.int64)
    duration_ps = int(round(duration_s * PS_PER_S))
    dropped: Dict[str, int] = {}

    def _noise(party: Party) -> List[Tuple[Provenance, TagStream]]:
        return [(kind, chunk.noise[(party, kind)]) for chunk in chunks for kind in (Provenance.BACKGROUND, Provenance.DARK)]

    alice, alice_prov, alice_pairs = _assemble_party(
        Party.ALICE,
        creation[detected_a] + jitter_a[detected_a],
        channel_a[detected_a],
        pair_index[detected_a],
        _noise(Party.ALICE),
        duration_ps,
        epoch,
        dropped,
    )
    bob_true, bob_prov, bob_pairs = _assemble_party(
        Party.BOB,
        creation[detected_b] + shift_b[detected_b] + jitter_b[detected_b],
        channel_b[detected_b],
        pair_index[detected_b],
        _noise(Party.BOB),
        duration_ps,
        epoch,
        dropped,
    )

    trajectory = draw_clock_trajectory(channel, duration_s, root.substream("clock"))
    bob, picked = _shift_by_trajectory(bob_true, trajectory)
    dropped["clock_bob"] = len(bob_true) - len(bob)

    emitted_a = np.zeros(creation.size, dtype=bool)
    emitted_a[alice_pairs[alice_pairs >= 0]] = True
    emitted_b = np.zeros(creation.size, dtype=bool)
    bob_pairs = bob_pairs[picked]
    emitted_b[bob_pairs[bob_pairs >= 0]] = True

    basis_names = np.array([Basis.TOA.value, Basis.TSUP.value])
    channel_names = np.array([ch.name for ch in DetectorChannel])
    pairs = pd.DataFrame(
        {
            "pair_index": pair_index,
            "creation_ps": creation,
            "basis_a": basis_names[np.concatenate([chunk.basis_a for chunk in chunks])],
            "basis_b": basis_names[np.concatenate([chunk.basis_b for chunk in chunks])],
            "channel_a": channel_names[channel_a],
            "channel_b": channel_names[channel_b],
            "shift_b_ps": shift_b,
            "detected_a": detected_a,
            "detected_b": detected_b,
            "emitted_a": emitted_a,
            "emitted_b": emitted_b,
        }
    )
    truth = GroundTruth(
        pairs=pairs,
        alice_provenance=alice_prov,
        alice_pair_index=alice_pairs,
        bob_provenance=bob_prov[picked],
        bob_pair_index=bob_pairs,
        bob_true_ps=bob_true.timestamps[picked],
        clock=trajectory,
        dropped=dropped,
    )
    logger.info(
        "Simulated %.1f s: %d pairs, %d Alice tags, %d Bob tags (%d pairs seen by both).",
        duration_s,
        creation.size,
        len(alice),
        len(bob),
        int((emitted_a & emitted_b).sum()),
    )
    return SimulatedSession(alice, bob, truth)


__all__ = [
    "ClockTrajectory",
    "GroundTruth",
    "PairCodes",
    "PairOutcome",
    "Provenance",
    "SimulatedSession",
    "apply_clock",
    "draw_clock_trajectory",
    "generate_background",
    "sample_pair_outcome",
    "sample_pair_outcomes",
    "simulate_session",
    "toa_error_probability",
    "tsup_match_probability",
]
