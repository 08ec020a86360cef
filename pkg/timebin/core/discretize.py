"""Time-frame discretization of synchronized tag streams.

The time axis is tiled into frames of ``frame_len_ps`` starting at
``grid_phase_ps``; every frame is split into ``d`` bins. A party's frame is
usable when exactly one detector clicked (or, for multi-click frames, after a
fair-sampling draw). Usable frames on both sides in the same basis increment
the TOA matrix or one of the four TSUP matrices.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from timebin.core.errors import ConfigError
from timebin.core.rng import as_generator
from timebin.core.timetag import PS_PER_S, Basis, DetectorChannel, Party, TagStream

logger = logging.getLogger(__name__)

DEFAULT_TAU_MZI_PS = 2_700
TSUP_KEYS = ("pp", "pm", "mp", "mm")


@dataclass(frozen=True)
class DiscretizationConfig:
    """Frame grid for one dimension ``d``."""

    tau_mzi_ps: int
    frame_len_ps: int
    bin_len_ps: int
    d: int
    k: int
    grid_phase_ps: int = 0

    def __post_init__(self) -> None:
        if min(self.tau_mzi_ps, self.frame_len_ps, self.bin_len_ps, self.d) < 1:
            raise ConfigError("tau_mzi_ps, frame_len_ps, bin_len_ps and d must be positive.")
        if self.frame_len_ps != self.d * self.bin_len_ps:
            raise ConfigError(
                f"Frame length {self.frame_len_ps} ps is not d * bin length ({self.d} * {self.bin_len_ps} ps)."
            )
        if self.tau_mzi_ps % self.bin_len_ps:
            raise ConfigError(
                f"Bin length {self.bin_len_ps} ps does not divide tau_MZI = {self.tau_mzi_ps} ps; k must be an integer."
            )
        if self.k != self.tau_mzi_ps // self.bin_len_ps:
            raise ConfigError(f"k = {self.k} does not equal tau_MZI / bin length.")
        if not 1 <= self.k < self.d:
            raise ConfigError(f"k = {self.k} leaves no in-frame superposition for d = {self.d}.")
        if not 0 <= self.grid_phase_ps < self.frame_len_ps:
            raise ConfigError("grid_phase_ps must lie in [0, frame_len_ps).")

    @classmethod
    def for_dimension(
        cls,
        d: int,
        tau_mzi_ps: int = DEFAULT_TAU_MZI_PS,
        frame_len_ps: Optional[int] = None,
        grid_phase_ps: int = 0,
    ) -> "DiscretizationConfig":
        frame = 2 * tau_mzi_ps if frame_len_ps is None else int(frame_len_ps)
        if d < 2:
            raise ConfigError(f"Dimension {d} is below 2.")
        if frame == 2 * tau_mzi_ps and d % 2:
            raise ConfigError(f"Odd dimension {d} is not supported with the default 2*tau_MZI frame.")
        if frame % d:
            raise ConfigError(f"Frame length {frame} ps is not divisible into {d} bins.")
        bin_len = frame // d
        if tau_mzi_ps % bin_len:
            raise ConfigError(f"d = {d} gives {bin_len} ps bins, which do not divide tau_MZI = {tau_mzi_ps} ps.")
        return cls(
            tau_mzi_ps=int(tau_mzi_ps),
            frame_len_ps=frame,
            bin_len_ps=bin_len,
            d=int(d),
            k=tau_mzi_ps // bin_len,
            grid_phase_ps=int(grid_phase_ps) % frame,
        )

    def with_phase(self, grid_phase_ps: int) -> "DiscretizationConfig":
        return DiscretizationConfig(
            self.tau_mzi_ps, self.frame_len_ps, self.bin_len_ps, self.d, self.k, int(grid_phase_ps) % self.frame_len_ps
        )

    @property
    def tsup_bins(self) -> int:
        """Number of in-frame TSUP start bins (``i + k <= d - 1``)."""

        return self.d - self.k

    @property
    def n_subspaces(self) -> int:
        return self.d // 2

    def outcome_space_size(self) -> int:
        """Distinct TSUP projectors per party; equals ``d`` on the default grid."""

        return 2 * self.tsup_bins


def valid_dimensions(
    tau_mzi_ps: int = DEFAULT_TAU_MZI_PS,
    frame_len_ps: Optional[int] = None,
    max_d: Optional[int] = None,
) -> List[int]:
    frame = 2 * tau_mzi_ps if frame_len_ps is None else frame_len_ps
    limit = frame if max_d is None else min(max_d, frame)
    dims = []
    for d in range(2, limit + 1):
        try:
            DiscretizationConfig.for_dimension(d, tau_mzi_ps, frame_len_ps)
        except ConfigError:
            continue
        dims.append(d)
    return dims


def dimension_table(
    d_list: Optional[Sequence[int]] = None,
    tau_mzi_ps: int = DEFAULT_TAU_MZI_PS,
    frame_len_ps: Optional[int] = None,
) -> pd.DataFrame:
    """(d, bin length, k) grid; every entry of an explicit ``d_list`` must be valid."""

    dims = valid_dimensions(tau_mzi_ps, frame_len_ps, max_d=36) if d_list is None else list(d_list)
    rows = []
    for d in dims:
        cfg = DiscretizationConfig.for_dimension(d, tau_mzi_ps, frame_len_ps)
        rows.append({"d": cfg.d, "bin_len_ps": cfg.bin_len_ps, "k": cfg.k, "n_subspaces": cfg.n_subspaces})
    return pd.DataFrame(rows, columns=["d", "bin_len_ps", "k", "n_subspaces"])


class OutcomeKind(IntEnum):
    EMPTY = 0
    SINGLE = 1
    MULTI = 2
    OUT_OF_FRAME = 3


_EMPTY_KINDS = np.array([OutcomeKind.EMPTY, OutcomeKind.OUT_OF_FRAME], dtype=np.int64)


@dataclass(frozen=True)
class PartyOutcome:
    """One party's view of a frame.

    ``sign`` is +1/-1 for TSUP results and 0 for TOA; ``clicks`` keeps the raw
    ``(channel, bin)`` detections of multi-click frames.
    """

    kind: OutcomeKind
    basis: Optional[Basis] = None
    bin: Optional[int] = None
    sign: int = 0
    clicks: Tuple[Tuple[DetectorChannel, int], ...] = ()

    @classmethod
    def empty(cls) -> "PartyOutcome":
        return cls(OutcomeKind.EMPTY)

    @classmethod
    def toa(cls, bin_index: int) -> "PartyOutcome":
        return cls(OutcomeKind.SINGLE, Basis.TOA, int(bin_index))

    @classmethod
    def tsup(cls, bin_index: int, sign: int) -> "PartyOutcome":
        if sign not in (1, -1):
            raise ValueError("TSUP sign must be +1 or -1.")
        return cls(OutcomeKind.SINGLE, Basis.TSUP, int(bin_index), int(sign))

    @classmethod
    def multi(cls, clicks: Iterable[Tuple[DetectorChannel, int]]) -> "PartyOutcome":
        return cls(OutcomeKind.MULTI, clicks=tuple((DetectorChannel(ch), int(b)) for ch, b in clicks))

    @classmethod
    def out_of_frame(cls, clicks: Iterable[Tuple[DetectorChannel, int]] = ()) -> "PartyOutcome":
        return cls(OutcomeKind.OUT_OF_FRAME, clicks=tuple((DetectorChannel(ch), int(b)) for ch, b in clicks))

    @property
    def is_empty(self) -> bool:
        return self.kind in (OutcomeKind.EMPTY, OutcomeKind.OUT_OF_FRAME)


@dataclass(frozen=True)
class FrameOutcome:
    frame_index: int
    alice: PartyOutcome
    bob: PartyOutcome


class Block(NamedTuple):
    """Half-open, frame-aligned analysis interval ``[start_ps, stop_ps)``."""

    index: int
    start_ps: int
    stop_ps: int

    @property
    def duration_s(self) -> float:
        return (self.stop_ps - self.start_ps) / PS_PER_S

    @property
    def start_s(self) -> float:
        return self.start_ps / PS_PER_S


def iter_blocks(
    a: TagStream,
    b: TagStream,
    block_len_s: float,
    cfg: DiscretizationConfig,
    end_ps: Optional[int] = None,
    min_fraction: float = 0.5,
) -> Iterator[Block]:
    """Split the session into blocks holding whole frames.

    Block ``n`` covers frames ``[round(n*B/F), round((n+1)*B/F))`` of the grid,
    so no frame straddles two blocks. A trailing block shorter than
    ``min_fraction`` of a full block is dropped.
    """

    if block_len_s <= 0:
        raise ConfigError("block_len_s must be positive.")
    if end_ps is None:
        end_ps = max(a.span[1] if len(a) else 0, b.span[1] if len(b) else 0) + 1
    frames_per_block = block_len_s * PS_PER_S / cfg.frame_len_ps
    if frames_per_block < 1:
        raise ConfigError(f"Block length {block_len_s} s is shorter than one frame.")
    total_frames = int(math.ceil((end_ps - cfg.grid_phase_ps) / cfg.frame_len_ps))
    index = 0
    while True:
        first = int(round(index * frames_per_block))
        if first >= total_frames:
            return
        last = min(int(round((index + 1) * frames_per_block)), total_frames)
        if (last - first) < min_fraction * frames_per_block and index > 0:
            logger.debug("Dropping trailing %.3f s block.", (last - first) * cfg.frame_len_ps / PS_PER_S)
            return
        yield Block(
            index,
            cfg.grid_phase_ps + first * cfg.frame_len_ps,
            cfg.grid_phase_ps + last * cfg.frame_len_ps,
        )
        index += 1


def _party_frames(stream: TagStream, cfg: DiscretizationConfig, block: Block) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-frame summary and raw clicks for one party inside ``block``."""

    part = stream.slice_time(block.start_ps, block.stop_ps)
    rel = part.timestamps - block.start_ps
    frame = rel // cfg.frame_len_ps
    bins = (rel % cfg.frame_len_ps) // cfg.bin_len_ps
    channel = part.channels.astype(np.int8)
    clicks = pd.DataFrame({"frame": frame, "channel": channel, "bin": bins})

    frames, first, n_clicks = np.unique(frame, return_index=True, return_counts=True)
    if frames.size:
        out_of_frame = (channel >= DetectorChannel.TSUP_PLUS) & (bins >= cfg.tsup_bins)
        any_oof = np.logical_or.reduceat(out_of_frame, first)
    else:
        any_oof = np.zeros(0, dtype=bool)
    kind = np.where(any_oof, OutcomeKind.OUT_OF_FRAME, np.where(n_clicks == 1, OutcomeKind.SINGLE, OutcomeKind.MULTI))
    single = kind == OutcomeKind.SINGLE
    summary = pd.DataFrame(
        {
            "frame": frames,
            "kind": kind.astype(np.int8),
            "basis": np.where(single, channel[first] >> 1, -1).astype(np.int8),
            "bin": np.where(single, bins[first], -1),
            "bit": np.where(single, channel[first] & 1, 0).astype(np.int8),
            "n_clicks": n_clicks,
        }
    )
    return summary, clicks


def _outcome_from_row(row, clicks: Optional[pd.DataFrame]) -> PartyOutcome:
    kind = OutcomeKind(int(row.kind))
    raw = ()
    if kind in (OutcomeKind.MULTI, OutcomeKind.OUT_OF_FRAME) and clicks is not None:
        raw = tuple(zip(clicks["channel"].tolist(), clicks["bin"].tolist()))
    if kind is OutcomeKind.SINGLE:
        if int(row.basis) == 0:
            return PartyOutcome.toa(int(row.bin))
        return PartyOutcome.tsup(int(row.bin), 1 if int(row.bit) == 0 else -1)
    if kind is OutcomeKind.MULTI:
        return PartyOutcome.multi(raw)
    return PartyOutcome.out_of_frame(raw)


@dataclass
class FrameTable:
    """Classified frames of one block; frames without any click are implicit."""

    cfg: DiscretizationConfig
    block: Block
    n_frames: int
    alice: pd.DataFrame
    bob: pd.DataFrame
    clicks: Dict[Party, pd.DataFrame] = field(default_factory=dict)

    @property
    def first_frame(self) -> int:
        """Absolute grid index of the block's first frame."""

        return (self.block.start_ps - self.cfg.grid_phase_ps) // self.cfg.frame_len_ps

    @property
    def integration_s(self) -> float:
        return self.block.duration_s

    def outcomes(self) -> Iterator[FrameOutcome]:
        """Frames where at least one party clicked, in time order."""

        frames = np.union1d(self.alice["frame"].to_numpy(), self.bob["frame"].to_numpy())
        tables = {
            Party.ALICE: self.alice.set_index("frame"),
            Party.BOB: self.bob.set_index("frame"),
        }
        grouped = {party: dict(tuple(df.groupby("frame"))) for party, df in self.clicks.items()}
        for frame in frames.tolist():
            sides = []
            for party in (Party.ALICE, Party.BOB):
                table = tables[party]
                if frame in table.index:
                    row = table.loc[frame]
                    sides.append(_outcome_from_row(row, grouped.get(party, {}).get(frame)))
                else:
                    sides.append(PartyOutcome.empty())
            yield FrameOutcome(frame, sides[0], sides[1])


def classify_frames(
    a: TagStream,
    b: TagStream,
    cfg: DiscretizationConfig,
    block: Optional[Block] = None,
) -> FrameTable:
    """Tile ``block`` with frames and classify each party's clicks per frame.

    TSUP clicks starting at bin ``>= d - k`` project outside the frame; such a
    frame counts as empty for that party.
    """

    if block is None:
        block = _session_block(a, b, cfg)
    if (block.start_ps - cfg.grid_phase_ps) % cfg.frame_len_ps or (block.stop_ps - block.start_ps) % cfg.frame_len_ps:
        raise ConfigError(f"Block {block.index} is not aligned to the {cfg.frame_len_ps} ps frame grid.")
    if block.stop_ps <= block.start_ps:
        raise ConfigError(f"Block {block.index} is empty.")
    alice, alice_clicks = _party_frames(a, cfg, block)
    bob, bob_clicks = _party_frames(b, cfg, block)
    table = FrameTable(
        cfg=cfg,
        block=block,
        n_frames=(block.stop_ps - block.start_ps) // cfg.frame_len_ps,
        alice=alice,
        bob=bob,
        clicks={Party.ALICE: alice_clicks, Party.BOB: bob_clicks},
    )
    logger.debug(
        "Block %d, d=%d: %d Alice and %d Bob occupied frames of %d.",
        block.index,
        cfg.d,
        len(alice),
        len(bob),
        table.n_frames,
    )
    return table


def _session_block(a: TagStream, b: TagStream, cfg: DiscretizationConfig) -> Block:
    """Smallest frame-aligned block covering both streams."""

    starts = [s.span[0] for s in (a, b) if len(s)]
    stops = [s.span[1] + 1 for s in (a, b) if len(s)]
    lo = min(starts) if starts else cfg.grid_phase_ps
    hi = max(stops) if stops else lo + 1
    first = (lo - cfg.grid_phase_ps) // cfg.frame_len_ps
    last = max(first + 1, -((cfg.grid_phase_ps - hi) // cfg.frame_len_ps))
    return Block(0, cfg.grid_phase_ps + first * cfg.frame_len_ps, cfg.grid_phase_ps + last * cfg.frame_len_ps)


def _fair_sample(n: int, cfg: DiscretizationConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform basis, then a uniform valid outcome in it. Returns (basis, bin, bit)."""

    basis = rng.integers(0, 2, n).astype(np.int8)
    toa_bin = rng.integers(0, cfg.d, n)
    tsup_bin = rng.integers(0, cfg.tsup_bins, n)
    bit = rng.integers(0, 2, n).astype(np.int8)
    bins = np.where(basis == 0, toa_bin, tsup_bin)
    return basis, bins, np.where(basis == 0, 0, bit).astype(np.int8)


def fair_sampling_assign(
    frame: PartyOutcome,
    cfg: DiscretizationConfig,
    rng: Union[np.random.Generator, int, None],
) -> PartyOutcome:
    """Replace a multi-click outcome with a uniformly random single outcome."""

    if frame.kind is not OutcomeKind.MULTI:
        raise ValueError("fair_sampling_assign expects a multi-click outcome.")
    basis, bins, bit = _fair_sample(1, cfg, as_generator(rng))
    if basis[0] == 0:
        return PartyOutcome.toa(int(bins[0]))
    return PartyOutcome.tsup(int(bins[0]), 1 if bit[0] == 0 else -1)


@dataclass(frozen=True)
class FrameStats:
    """Frame bookkeeping of one block.

    ``empty + single_sided + valid + mixed_basis + multi_resolved == total``.
    Mixed-basis takes precedence over multi_resolved for multi frames whose
    draw lands in the other basis.
    """

    total: int
    empty: int
    single_sided: int
    valid: int
    mixed_basis: int
    multi_resolved: int
    multi_alice: int = 0
    multi_bob: int = 0
    out_of_frame_alice: int = 0
    out_of_frame_bob: int = 0
    singles_alice: int = 0
    singles_bob: int = 0

    @property
    def accepted(self) -> int:
        return self.valid + self.multi_resolved

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class CorrelationMatrices:
    """TOA and TSUP coincidence matrices of one block at one dimension.

    ``m_tsup`` is indexed ``[sign_a, sign_b]`` with 0 = plus, 1 = minus.
    """

    cfg: DiscretizationConfig
    m_toa: np.ndarray
    m_tsup: np.ndarray
    frame_stats: FrameStats
    integration_s: float
    block_index: int = 0

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def m_tsup_pp(self) -> np.ndarray:
        return self.m_tsup[0, 0]

    @property
    def m_tsup_pm(self) -> np.ndarray:
        return self.m_tsup[0, 1]

    @property
    def m_tsup_mp(self) -> np.ndarray:
        return self.m_tsup[1, 0]

    @property
    def m_tsup_mm(self) -> np.ndarray:
        return self.m_tsup[1, 1]

    @property
    def total_mass(self) -> int:
        return int(self.m_toa.sum() + self.m_tsup.sum())

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        """One labelled d x d table per matrix (rows Alice bins, columns Bob bins)."""

        labels = list(range(self.d))
        frames = {"toa": pd.DataFrame(self.m_toa, index=labels, columns=labels)}
        for key, matrix in zip(TSUP_KEYS, self.m_tsup.reshape(4, self.d, self.d)):
            frames[f"tsup_{key}"] = pd.DataFrame(matrix, index=labels, columns=labels)
        for frame in frames.values():
            frame.index.name = "bin_a"
        return frames


def _outcomes_to_frames(frames: Sequence[FrameOutcome]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    rows: Dict[Party, List[dict]] = {Party.ALICE: [], Party.BOB: []}
    for outcome in frames:
        for party, side in ((Party.ALICE, outcome.alice), (Party.BOB, outcome.bob)):
            if side.kind is OutcomeKind.EMPTY:
                continue
            single = side.kind is OutcomeKind.SINGLE
            rows[party].append(
                {
                    "frame": outcome.frame_index,
                    "kind": int(side.kind),
                    "basis": (0 if side.basis is Basis.TOA else 1) if single else -1,
                    "bin": side.bin if single else -1,
                    "bit": 1 if side.sign == -1 else 0,
                    "n_clicks": 1 if single else max(len(side.clicks), 2),
                }
            )
    columns = ["frame", "kind", "basis", "bin", "bit", "n_clicks"]
    tables = []
    for party in (Party.ALICE, Party.BOB):
        table = pd.DataFrame(rows[party], columns=columns).astype("int64")
        tables.append(table.sort_values("frame", kind="stable").reset_index(drop=True))
    return tables[0], tables[1]


def _align(table: pd.DataFrame, frames: np.ndarray) -> Dict[str, np.ndarray]:
    """Reindex a party summary onto ``frames``; missing frames become EMPTY."""

    own = table["frame"].to_numpy()
    out = {}
    pos = np.minimum(np.searchsorted(own, frames), max(own.size - 1, 0))
    present = own[pos] == frames if own.size else np.zeros(frames.size, dtype=bool)
    for column, fill in (("kind", OutcomeKind.EMPTY), ("basis", -1), ("bin", -1), ("bit", 0)):
        values = np.full(frames.size, int(fill), dtype=np.int64)
        values[present] = table[column].to_numpy()[pos[present]]
        out[column] = values
    return out


def accumulate(
    frames: Union[FrameTable, Sequence[FrameOutcome]],
    cfg: Optional[DiscretizationConfig] = None,
    rng: Union[np.random.Generator, int, None] = None,
    integration_s: Optional[float] = None,
) -> CorrelationMatrices:
    """Fill the correlation matrices from classified frames.

    A plain sequence of :class:`FrameOutcome` must list every frame of the
    block, empty ones included; its length is the frame total. Multi-click
    frames facing a non-empty partner frame are resolved by fair sampling,
    Alice's in frame order first, then Bob's.
    """

    if isinstance(frames, FrameTable):
        cfg = frames.cfg if cfg is None else cfg
        alice, bob = frames.alice, frames.bob
        n_frames = frames.n_frames
        integration_s = frames.integration_s if integration_s is None else integration_s
        block_index = frames.block.index
        singles = (
            len(frames.clicks.get(Party.ALICE, ())),
            len(frames.clicks.get(Party.BOB, ())),
        )
    else:
        if cfg is None:
            raise ConfigError("accumulate needs a DiscretizationConfig for a plain outcome sequence.")
        frames = list(frames)
        alice, bob = _outcomes_to_frames(frames)
        n_frames = len(frames)
        if integration_s is None:
            integration_s = n_frames * cfg.frame_len_ps / PS_PER_S
        block_index = 0
        singles = (int(alice["n_clicks"].sum()), int(bob["n_clicks"].sum()))
    generator = as_generator(rng)

    occupied = np.union1d(alice["frame"].to_numpy(), bob["frame"].to_numpy())
    side_a = _align(alice, occupied)
    side_b = _align(bob, occupied)
    empty_a = np.isin(side_a["kind"], _EMPTY_KINDS)
    empty_b = np.isin(side_b["kind"], _EMPTY_KINDS)
    both = ~empty_a & ~empty_b

    kept = tuple({name: values[both] for name, values in side.items()} for side in (side_a, side_b))
    multi = []
    for side in kept:
        is_multi = side["kind"] == OutcomeKind.MULTI
        n_multi = int(is_multi.sum())
        if n_multi:
            basis, bins, bit = _fair_sample(n_multi, cfg, generator)
            side["basis"][is_multi] = basis
            side["bin"][is_multi] = bins
            side["bit"][is_multi] = bit
        multi.append(is_multi)
    kept_a, kept_b = kept
    matched = kept_a["basis"] == kept_b["basis"]
    resolved = multi[0] | multi[1]

    d = cfg.d
    toa = matched & (kept_a["basis"] == 0)
    m_toa = np.bincount(kept_a["bin"][toa] * d + kept_b["bin"][toa], minlength=d * d).reshape(d, d)
    tsup = matched & (kept_a["basis"] == 1)
    flat = ((kept_a["bit"][tsup] * 2 + kept_b["bit"][tsup]) * d + kept_a["bin"][tsup]) * d + kept_b["bin"][tsup]
    m_tsup = np.bincount(flat, minlength=4 * d * d).reshape(2, 2, d, d)

    n_both = int(both.sum())
    n_single_sided = int((empty_a ^ empty_b).sum())
    stats = FrameStats(
        total=int(n_frames),
        empty=int(n_frames) - n_both - n_single_sided,
        single_sided=n_single_sided,
        valid=int((matched & ~resolved).sum()),
        mixed_basis=int((~matched).sum()),
        multi_resolved=int((matched & resolved).sum()),
        multi_alice=int((alice["kind"] == OutcomeKind.MULTI).sum()),
        multi_bob=int((bob["kind"] == OutcomeKind.MULTI).sum()),
        out_of_frame_alice=int((alice["kind"] == OutcomeKind.OUT_OF_FRAME).sum()),
        out_of_frame_bob=int((bob["kind"] == OutcomeKind.OUT_OF_FRAME).sum()),
        singles_alice=int(singles[0]),
        singles_bob=int(singles[1]),
    )
    matrices = CorrelationMatrices(
        cfg=cfg,
        m_toa=m_toa.astype(np.int64),
        m_tsup=m_tsup.astype(np.int64),
        frame_stats=stats,
        integration_s=float(integration_s),
        block_index=block_index,
    )
    logger.debug("d=%d block %d: %d accepted coincidences.", d, block_index, matrices.total_mass)
    return matrices


class SubspaceCounts(NamedTuple):
    toa: Tuple[int, int, int, int]
    tsup: Tuple[int, int, int, int]

    @property
    def total(self) -> int:
        return sum(self.toa) + sum(self.tsup)


def subspace_counts(m: CorrelationMatrices, i: int) -> SubspaceCounts:
    """Post-selected counts of qubit subspace ``{|i>, |i + d/2>}``.

    TOA order is ``(ii, i j, j i, j j)`` with ``j = i + d/2``; TSUP order is
    ``(++, +-, -+, --)`` at ``[i][i]``.
    """

    half = m.d // 2
    if not 0 <= i < half:
        raise IndexError(f"Subspace index {i} outside [0, {half}).")
    j = i + half
    toa = (int(m.m_toa[i, i]), int(m.m_toa[i, j]), int(m.m_toa[j, i]), int(m.m_toa[j, j]))
    tsup = tuple(int(m.m_tsup[sa, sb, i, i]) for sa in (0, 1) for sb in (0, 1))
    return SubspaceCounts(toa, tsup)


def discretize_block(
    a: TagStream,
    b: TagStream,
    cfg: DiscretizationConfig,
    block: Block,
    rng: Union[np.random.Generator, int, None] = None,
) -> CorrelationMatrices:
    return accumulate(classify_frames(a, b, cfg, block), cfg, rng)


def _diagonal_mass(table: FrameTable) -> int:
    """Single/single coincidences landing on the matched-bin diagonal."""

    occupied = np.union1d(table.alice["frame"].to_numpy(), table.bob["frame"].to_numpy())
    side_a = _align(table.alice, occupied)
    side_b = _align(table.bob, occupied)
    single = (side_a["kind"] == OutcomeKind.SINGLE) & (side_b["kind"] == OutcomeKind.SINGLE)
    same = single & (side_a["basis"] == side_b["basis"]) & (side_a["bin"] == side_b["bin"])
    return int(same.sum())


def calibrate_grid_phase(
    a: TagStream,
    b: TagStream,
    cfg: DiscretizationConfig,
    n_phases: int = 16,
    calibration_s: float = 1.0,
    start_ps: Optional[int] = None,
) -> int:
    """Pick the frame-grid origin that maximizes diagonal coincidences.

    ``n_phases`` evenly spaced origins in ``[0, frame_len_ps)`` are scored on
    the first ``calibration_s`` of data; ties go to the smallest phase.
    """

    if n_phases < 1:
        raise ConfigError("n_phases must be at least 1.")
    if start_ps is None:
        start_ps = a.span[0] if len(a) else 0
    n_frames = max(1, int(round(calibration_s * PS_PER_S / cfg.frame_len_ps)))
    best_phase, best_score = 0, -1
    for j in range(n_phases):
        phase = j * cfg.frame_len_ps // n_phases
        trial = cfg.with_phase(phase)
        first = (start_ps - phase) // cfg.frame_len_ps
        block = Block(0, phase + first * cfg.frame_len_ps, phase + (first + n_frames) * cfg.frame_len_ps)
        score = _diagonal_mass(classify_frames(a, b, trial, block))
        logger.debug("Grid phase %d ps: diagonal mass %d.", phase, score)
        if score > best_score:
            best_phase, best_score = phase, score
    logger.info("Calibrated frame grid phase %d ps (d=%d, %d diagonal coincidences).", best_phase, cfg.d, best_score)
    return best_phase


__all__ = [
    "Block",
    "CorrelationMatrices",
    "DiscretizationConfig",
    "FrameOutcome",
    "FrameStats",
    "FrameTable",
    "OutcomeKind",
    "PartyOutcome",
    "SubspaceCounts",
    "accumulate",
    "calibrate_grid_phase",
    "classify_frames",
    "dimension_table",
    "discretize_block",
    "fair_sampling_assign",
    "iter_blocks",
    "subspace_counts",
    "valid_dimensions",
]
