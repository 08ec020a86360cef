"""Clock synchronization from the photon-pair correlation peak.

A coarse cross-correlation locks onto the pair peak inside a wide window,
then each block is re-measured in a narrow fine window seeded at the previous
block's offset. The block offsets become the knots of a piecewise-linear
:class:`ClockModel` that is subtracted from Bob's timestamps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from timebin.core.errors import NoPeakError, SyncFailure
from timebin.core.timetag import PS_PER_S, TagStream

logger = logging.getLogger(__name__)

# Upper bound on pair delays materialised at once by the window sweep.
MAX_PAIRS_PER_CHUNK = 4_000_000
REFINE_ITERATIONS = 5


@dataclass(frozen=True)
class CorrelationHistogram:
    """Counts of delays ``t_b - t_a`` in ``[lo_ps + m*w, lo_ps + (m+1)*w)``."""

    bin_width_ps: int
    lo_ps: int
    hi_ps: int
    counts: np.ndarray

    def __post_init__(self) -> None:
        span = self.hi_ps - self.lo_ps
        if self.bin_width_ps < 1 or span <= 0 or span % self.bin_width_ps:
            raise ValueError("Histogram range must be a positive multiple of the bin width.")
        if self.counts.size != span // self.bin_width_ps:
            raise ValueError("Histogram counts length does not match its range.")

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def bin_centers_ps(self) -> np.ndarray:
        return self.lo_ps + (np.arange(self.n_bins) + 0.5) * self.bin_width_ps

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"delay_ps": self.bin_centers_ps, "counts": self.counts})


class PeakEstimate(NamedTuple):
    offset_ps: float
    significance: float
    # counts inside the 3-bin centroid window
    counts: int = 0


def iter_pair_delays(a: TagStream, b: TagStream, lo_ps: int, hi_ps: int) -> Iterator[np.ndarray]:
    """Yield arrays of every delay ``t_b - t_a`` in ``[lo_ps, hi_ps)``.

    For each Alice tag the matching Bob slice is found by binary search on the
    sorted Bob times, so the cost is linear in the tags plus the number of
    pairs inside the window. Pairs are materialised in bounded chunks.
    """

    if not len(a) or not len(b):
        return
    t_a = a.timestamps
    t_b = b.timestamps
    first = np.searchsorted(t_b, t_a + lo_ps, side="left")
    last = np.searchsorted(t_b, t_a + hi_ps, side="left")
    per_tag = last - first
    active = np.flatnonzero(per_tag)
    if active.size == 0:
        return
    cumulative = np.cumsum(per_tag[active])
    start = 0
    while start < active.size:
        base = cumulative[start - 1] if start else 0
        stop = int(np.searchsorted(cumulative, base + MAX_PAIRS_PER_CHUNK, side="right"))
        stop = max(stop, start + 1)
        rows = active[start:stop]
        counts = per_tag[rows]
        owners = np.repeat(rows, counts)
        steps = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        yield t_b[first[owners] + steps] - t_a[owners]
        start = stop


def cross_correlate(
    a: TagStream,
    b: TagStream,
    bin_width_ps: int,
    search_lo_ps: int,
    search_hi_ps: int,
) -> CorrelationHistogram:
    """Histogram of Bob-minus-Alice delays within the search window."""

    bin_width_ps = int(bin_width_ps)
    if search_hi_ps <= search_lo_ps:
        raise ValueError("search_hi_ps must exceed search_lo_ps.")
    if bin_width_ps < 1:
        raise ValueError("bin_width_ps must be at least 1 ps.")
    n_bins = int(math.ceil((search_hi_ps - search_lo_ps) / bin_width_ps))
    hi = int(search_lo_ps) + n_bins * bin_width_ps
    counts = np.zeros(n_bins, dtype=np.int64)
    for delays in iter_pair_delays(a, b, int(search_lo_ps), hi):
        counts += np.bincount((delays - search_lo_ps) // bin_width_ps, minlength=n_bins)
    return CorrelationHistogram(bin_width_ps, int(search_lo_ps), hi, counts)


def find_peak(h: CorrelationHistogram) -> PeakEstimate:
    """Locate the correlation peak by a 3-bin centroid around the maximum.

    Significance is ``(max - mean) / std`` of the bins outside the centroid
    neighbourhood; a perfectly flat remainder gives ``inf``.
    """

    if h.n_bins < 3:
        raise ValueError("find_peak needs at least 3 histogram bins.")
    counts = h.counts.astype(float)
    peak = int(np.argmax(counts))
    if counts[peak] <= 0:
        raise NoPeakError("Correlation histogram is empty; no peak to locate.")
    lo = min(max(peak - 1, 0), h.n_bins - 3)
    window = slice(lo, lo + 3)
    weights = counts[window]
    offset = float(np.dot(weights, h.bin_centers_ps[window]) / weights.sum())

    rest = np.delete(counts, np.arange(lo, lo + 3))
    mean = rest.mean() if rest.size else 0.0
    std = rest.std() if rest.size else 0.0
    if std > 0:
        significance = (counts[peak] - mean) / std
    else:
        significance = math.inf if counts[peak] > mean else 0.0
    return PeakEstimate(offset, float(significance), int(weights.sum()))


@dataclass(frozen=True)
class ClockModel:
    """Piecewise-linear Bob-minus-Alice offset, constant beyond the end knots."""

    knots_s: np.ndarray
    offsets_ps: np.ndarray
    significance: np.ndarray = field(default_factory=lambda: np.empty(0))
    flagged: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    def __post_init__(self) -> None:
        knots = np.asarray(self.knots_s, dtype=float)
        offsets = np.asarray(self.offsets_ps, dtype=float)
        if knots.ndim != 1 or knots.size == 0 or offsets.shape != knots.shape:
            raise ValueError("ClockModel needs matching, non-empty knot and offset arrays.")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("ClockModel knots must be strictly increasing in time.")
        significance = np.asarray(self.significance, dtype=float)
        flagged = np.asarray(self.flagged, dtype=bool)
        object.__setattr__(self, "knots_s", knots)
        object.__setattr__(self, "offsets_ps", offsets)
        object.__setattr__(self, "significance", significance if significance.size else np.full(knots.size, np.nan))
        object.__setattr__(self, "flagged", flagged if flagged.size else np.zeros(knots.size, dtype=bool))

    @classmethod
    def constant(cls, offset_ps: float) -> "ClockModel":
        return cls(np.array([0.0]), np.array([float(offset_ps)]))

    def __call__(self, t_ps: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(t_ps, dtype=float) / PS_PER_S, self.knots_s, self.offsets_ps)

    def slope_ps_per_s(self) -> float:
        """Least-squares drift rate over the unflagged knots."""

        good = ~self.flagged
        if good.sum() < 2:
            return 0.0
        slope, _ = np.polyfit(self.knots_s[good], self.offsets_ps[good], 1)
        return float(slope)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "block_center_s": self.knots_s,
                "offset_ps": self.offsets_ps,
                "significance": self.significance,
                "flagged": self.flagged,
            }
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "ClockModel":
        flagged = df["flagged"].to_numpy(dtype=bool) if "flagged" in df else np.empty(0, dtype=bool)
        significance = df["significance"].to_numpy(dtype=float) if "significance" in df else np.empty(0)
        return cls(
            df["block_center_s"].to_numpy(dtype=float),
            df["offset_ps"].to_numpy(dtype=float),
            significance,
            flagged,
        )


def _mean_delay(a: TagStream, b: TagStream, center_ps: float, half_width_ps: int) -> Optional[float]:
    lo = int(math.floor(center_ps - half_width_ps))
    hi = int(math.ceil(center_ps + half_width_ps)) + 1
    total = 0
    n = 0
    for delays in iter_pair_delays(a, b, lo, hi):
        total += int(delays.sum())
        n += delays.size
    return total / n if n else None


def _refine_offset(
    a: TagStream,
    b: TagStream,
    center_ps: float,
    half_width_ps: int,
    max_iterations: int = REFINE_ITERATIONS,
) -> Optional[float]:
    """Mean raw delay within ``±half_width_ps`` of a histogram estimate.

    The window is re-centred on each new mean until it moves by less than
    half a picosecond, so a peak smeared by in-block drift is not truncated
    on one side.
    """

    if half_width_ps <= 0:
        return None
    current = _mean_delay(a, b, center_ps, half_width_ps)
    for _ in range(max_iterations - 1):
        if current is None:
            break
        following = _mean_delay(a, b, current, half_width_ps)
        if following is None or abs(following - current) < 0.5:
            return following if following is not None else current
        current = following
    return current


def _locate(
    a: TagStream,
    b: TagStream,
    center_ps: float,
    half_window_ps: int,
    bin_width_ps: int,
) -> Optional[PeakEstimate]:
    lo = int(round(center_ps)) - half_window_ps
    histogram = cross_correlate(a, b, bin_width_ps, lo, lo + 2 * half_window_ps)
    try:
        return find_peak(histogram)
    except NoPeakError:
        return None


def track_drift(
    a: TagStream,
    b: TagStream,
    block_len_s: float = 10.0,
    bin_width_ps: int = 10,
    search_window_ps: int = 10_000,
    *,
    coarse_bin_ps: int = 1_000,
    coarse_window_ps: int = 1_000_000,
    initial_offset_ps: int = 0,
    min_significance: float = 5.0,
    refine_window_ps: int = 200,
    min_peak_counts: int = 10,
) -> ClockModel:
    """Measure the clock offset block by block and return the knot list.

    Until a block locks, the coarse window around ``initial_offset_ps`` is
    searched first; once locked, only the fine window around the previous
    offset is histogrammed. Blocks whose fine peak falls below
    ``min_significance`` or holds fewer than ``min_peak_counts`` counts are
    flagged and take interpolated offsets.
    """

    def accepted(peak: Optional[PeakEstimate]) -> bool:
        return peak is not None and peak.significance >= min_significance and peak.counts >= min_peak_counts

    if not len(a) or not len(b):
        raise SyncFailure("Cannot synchronize an empty stream.")
    start_ps, stop_ps = a.span
    block_ps = int(round(block_len_s * PS_PER_S))
    n_blocks = int(math.ceil((stop_ps + 1 - start_ps) / block_ps))
    if n_blocks < 2:
        raise SyncFailure(f"Session spans a single {block_len_s:g} s block; need at least 2 to track drift.")

    centers: List[float] = []
    offsets: List[float] = []
    significance: List[float] = []
    good: List[bool] = []
    locked: Optional[float] = None

    for index in range(n_blocks):
        block_start = start_ps + index * block_ps
        block_stop = min(block_start + block_ps, stop_ps + 1)
        a_block = a.slice_time(block_start, block_stop)
        centers.append((block_start + block_stop) / 2 / PS_PER_S)

        guess = locked
        if guess is None:
            coarse = _locate(a_block, b, initial_offset_ps, coarse_window_ps, coarse_bin_ps)
            if accepted(coarse):
                guess = coarse.offset_ps
        fine = _locate(a_block, b, guess, search_window_ps, bin_width_ps) if guess is not None else None

        if not accepted(fine):
            offsets.append(math.nan)
            significance.append(fine.significance if fine is not None else 0.0)
            good.append(False)
            logger.warning("Sync block %d at %.1f s flagged (no significant peak).", index, centers[-1])
            continue

        refined = _refine_offset(a_block, b, fine.offset_ps, refine_window_ps)
        offset = refined if refined is not None else fine.offset_ps
        offsets.append(offset)
        significance.append(fine.significance)
        good.append(True)
        locked = offset
        logger.debug("Sync block %d: offset %.1f ps, significance %.1f.", index, offset, fine.significance)

    good_mask = np.array(good)
    if good_mask.sum() < 2:
        raise SyncFailure(
            f"Only {int(good_mask.sum())} of {n_blocks} blocks produced a significant correlation peak."
        )
    knots = np.array(centers)
    values = np.array(offsets)
    values[~good_mask] = np.interp(knots[~good_mask], knots[good_mask], values[good_mask])
    logger.info("Clock model from %d/%d significant blocks.", int(good_mask.sum()), n_blocks)
    return ClockModel(knots, values, np.array(significance), ~good_mask)


def apply_model(b: TagStream, m: ClockModel) -> TagStream:
    """Move Bob's tags onto Alice's time axis: ``t -> t - m(t)``."""

    corrected = b.timestamps - np.rint(m(b.timestamps)).astype(np.int64)
    keep = corrected >= 0
    if not keep.all():
        logger.warning("Clock correction moved %d tags before the epoch; dropped.", int((~keep).sum()))
    stream, _ = TagStream.from_unsorted(b.party, corrected[keep], b.channels[keep], b.epoch, drop_duplicates=True)
    return stream


def synchronize(
    a: TagStream,
    b: TagStream,
    config,
    initial_offset_ps: Optional[int] = None,
) -> tuple[ClockModel, TagStream]:
    """Track the drift with a :class:`~timebin.schemas.SyncConfig` and correct Bob.

    ``initial_offset_ps`` overrides the config's coarse-search centre.
    """

    if initial_offset_ps is None:
        initial_offset_ps = config.initial_offset_ps or 0

    model = track_drift(
        a,
        b,
        config.block_len_s,
        config.fine_bin_ps,
        config.fine_window_ps,
        coarse_bin_ps=config.coarse_bin_ps,
        coarse_window_ps=config.coarse_window_ps,
        initial_offset_ps=initial_offset_ps,
        min_significance=config.min_significance,
        refine_window_ps=config.refine_window_ps,
        min_peak_counts=config.min_peak_counts,
    )
    return model, apply_model(b, model)


__all__ = [
    "ClockModel",
    "CorrelationHistogram",
    "PeakEstimate",
    "apply_model",
    "cross_correlate",
    "find_peak",
    "iter_pair_delays",
    "synchronize",
    "track_drift",
]
