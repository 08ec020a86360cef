"""Time-tag data model, stream containers and bit-exact tag file I/O.

Every other module consumes :class:`TagStream`. A stream is immutable once
built: the timestamp and channel arrays are flagged read-only so streams can be
shared between threads without copies.
"""
from __future__ import annotations

import io
import logging
import re
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from timebin.core.errors import OrderingError, StreamMismatchError, TagFormatError

logger = logging.getLogger(__name__)

MAGIC = b"FTAG"
FORMAT_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sHBBq")
RECORD_DTYPE = np.dtype([("channel", "<u1"), ("timestamp", "<i8")])
CSV_COLUMNS = ["channel", "timestamp_ps"]
PS_PER_S = 10**12

PathLike = Union[str, Path]


class Party(str, Enum):
    ALICE = "alice"
    BOB = "bob"

    @property
    def code(self) -> int:
        return 0 if self is Party.ALICE else 1

    @classmethod
    def from_code(cls, code: int) -> "Party":
        if code == 0:
            return cls.ALICE
        if code == 1:
            return cls.BOB
        raise ValueError(f"Unknown party code {code}.")


class Basis(str, Enum):
    TOA = "toa"
    TSUP = "tsup"


class DetectorChannel(IntEnum):
    """The four detectors of one party's receiver.

    TSUP_PLUS is the transmitted interferometer output (projection onto
    ``|+_{i,j}>``), TSUP_MINUS the reflected one (``|-_{i,j}>``).
    """

    TOA_H = 0
    TOA_V = 1
    TSUP_PLUS = 2
    TSUP_MINUS = 3

    @property
    def basis(self) -> Basis:
        return Basis.TOA if self.value < 2 else Basis.TSUP

    @property
    def sign(self) -> int:
        """+1/-1 for the TSUP outputs, 0 for time-of-arrival detectors."""

        if self is DetectorChannel.TSUP_PLUS:
            return 1
        if self is DetectorChannel.TSUP_MINUS:
            return -1
        return 0


CHANNEL_BY_NAME = {channel.name: channel for channel in DetectorChannel}
TAG_FORMATS = ("binary", "csv")


@dataclass(frozen=True)
class TimeTag:
    """One detection event."""

    timestamp: int
    channel: DetectorChannel
    party: Party


def first_order_violation(timestamps: np.ndarray, channels: np.ndarray) -> Optional[int]:
    """Return the index of the first tag not strictly after its predecessor."""

    if len(timestamps) < 2:
        return None
    dt = np.diff(timestamps)
    bad = (dt < 0) | ((dt == 0) & (np.diff(channels.astype(np.int16)) <= 0))
    hits = np.flatnonzero(bad)
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


@dataclass(frozen=True, eq=False)
class TagStream:
    """Time-ordered detections of one party, relative to ``epoch`` (Unix seconds)."""

    party: Party
    timestamps: np.ndarray
    channels: np.ndarray
    epoch: int = 0

    def __post_init__(self) -> None:
        timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        if timestamps.ndim != 1 or channels.shape != timestamps.shape:
            raise ValueError("timestamps and channels must be 1-D arrays of equal length.")
        if channels.size and int(channels.max()) > DetectorChannel.TSUP_MINUS:
            raise ValueError(f"Channel code {int(channels.max())} is not a detector channel.")
        if timestamps.size and int(timestamps[0]) < 0:
            raise OrderingError("Timestamps must not precede the session epoch.", index=0)
        violation = first_order_violation(timestamps, channels)
        if violation is not None:
            raise OrderingError(
                "Tags out of order at index "
                f"{violation}: ({int(timestamps[violation - 1])} ps, "
                f"{DetectorChannel(int(channels[violation - 1])).name}) followed by "
                f"({int(timestamps[violation])} ps, {DetectorChannel(int(channels[violation])).name}).",
                index=violation,
            )
        timestamps.setflags(write=False)
        channels.setflags(write=False)
        object.__setattr__(self, "party", Party(self.party))
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "epoch", int(self.epoch))

    @classmethod
    def empty(cls, party: Party, epoch: int = 0) -> "TagStream":
        return cls(party, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8), epoch)

    @classmethod
    def from_tags(cls, party: Party, tags: Iterable[Tuple[DetectorChannel, int]], epoch: int = 0) -> "TagStream":
        """Build a stream from already ordered ``(channel, timestamp)`` pairs."""

        pairs = list(tags)
        channels = np.array([int(channel) for channel, _ in pairs], dtype=np.uint8)
        timestamps = np.array([int(timestamp) for _, timestamp in pairs], dtype=np.int64)
        return cls(party, timestamps, channels, epoch)

    @classmethod
    def from_unsorted(
        cls,
        party: Party,
        timestamps: np.ndarray,
        channels: np.ndarray,
        epoch: int = 0,
        drop_duplicates: bool = False,
    ) -> Tuple["TagStream", np.ndarray]:
        """Sort raw detections into a stream.

        Returns the stream and the index array mapping each output tag back to
        its input position, so callers can reorder annotations alongside.
        Exact (timestamp, channel) repeats raise unless ``drop_duplicates``,
        in which case the earliest input occurrence is kept.
        """

        timestamps = np.asarray(timestamps, dtype=np.int64)
        channels = np.asarray(channels, dtype=np.uint8)
        order = np.lexsort((channels, timestamps))
        if drop_duplicates and order.size > 1:
            ts_sorted = timestamps[order]
            ch_sorted = channels[order]
            repeat = np.zeros(order.size, dtype=bool)
            repeat[1:] = (ts_sorted[1:] == ts_sorted[:-1]) & (ch_sorted[1:] == ch_sorted[:-1])
            if repeat.any():
                logger.warning("Dropping %d coincident duplicate tags for %s.", int(repeat.sum()), Party(party).value)
                order = order[~repeat]
        return cls(party, timestamps[order], channels[order], epoch), order

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __iter__(self) -> Iterator[TimeTag]:
        for timestamp, channel in zip(self.timestamps.tolist(), self.channels.tolist()):
            yield TimeTag(timestamp=timestamp, channel=DetectorChannel(channel), party=self.party)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.party is other.party
            and self.epoch == other.epoch
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.channels, other.channels)
        )

    def __repr__(self) -> str:
        return f"TagStream(party={self.party.value}, tags={len(self)}, epoch={self.epoch})"

    @property
    def span(self) -> Tuple[int, int]:
        """First and last timestamp; (0, 0) for an empty stream."""

        if not len(self):
            return 0, 0
        return int(self.timestamps[0]), int(self.timestamps[-1])

    def index_range(self, start_ps: int, stop_ps: int) -> Tuple[int, int]:
        lo = int(np.searchsorted(self.timestamps, start_ps, side="left"))
        hi = int(np.searchsorted(self.timestamps, stop_ps, side="left"))
        return lo, hi

    def slice_time(self, start_ps: int, stop_ps: int) -> "TagStream":
        """Tags with ``start_ps <= t < stop_ps`` (views, no copy)."""

        lo, hi = self.index_range(start_ps, stop_ps)
        return TagStream(self.party, self.timestamps[lo:hi], self.channels[lo:hi], self.epoch)

    def channel_mask(self, *channels: DetectorChannel) -> np.ndarray:
        return np.isin(self.channels, [int(channel) for channel in channels])


def _resolve_format(path: Path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "binary"
    if fmt not in TAG_FORMATS:
        raise ValueError(f"Unsupported tag format '{fmt}'. Expected binary or csv.")
    return fmt


def read_tags(
    path: PathLike,
    fmt: Optional[str] = None,
    party: Optional[Party] = None,
    epoch: Optional[int] = None,
) -> TagStream:
    """Load a tag file. ``party``/``epoch`` fill in what a CSV or empty binary file does not state."""

    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if not path.exists():
        raise FileNotFoundError(f"Tag file not found: {path}")
    if fmt == "binary":
        return _read_binary(path.read_bytes(), party)
    return _read_csv(path.read_text(encoding="utf-8"), party, epoch)


def _read_binary(data: bytes, party: Optional[Party]) -> TagStream:
    if not data:
        if party is None:
            raise TagFormatError("Empty file has no header naming its party; pass party explicitly", offset=0)
        return TagStream.empty(party)
    if len(data) < HEADER_STRUCT.size:
        raise TagFormatError("Truncated header", offset=len(data))
    magic, version, party_code, _reserved, epoch = HEADER_STRUCT.unpack_from(data, 0)
    if magic != MAGIC:
        raise TagFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise TagFormatError(f"Unsupported format version {version}", offset=4)
    try:
        file_party = Party.from_code(party_code)
    except ValueError as exc:
        raise TagFormatError(str(exc), offset=6) from exc

    body = len(data) - HEADER_STRUCT.size
    n_records, remainder = divmod(body, RECORD_DTYPE.itemsize)
    if remainder:
        raise TagFormatError(
            "Truncated record", offset=HEADER_STRUCT.size + n_records * RECORD_DTYPE.itemsize
        )
    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=n_records, offset=HEADER_STRUCT.size)
    bad_channel = np.flatnonzero(records["channel"] > DetectorChannel.TSUP_MINUS)
    if bad_channel.size:
        index = int(bad_channel[0])
        raise TagFormatError(
            f"Unknown channel code {int(records['channel'][index])}",
            offset=HEADER_STRUCT.size + index * RECORD_DTYPE.itemsize,
        )
    return TagStream(file_party, records["timestamp"].copy(), records["channel"].copy(), epoch)


_METADATA_PATTERN = re.compile(r"#\s*party=(\w+)\s+epoch=(-?\d+)\s*$")
_PARSER_LINE_PATTERN = re.compile(r"line (\d+)")
_INT64_MIN, _INT64_MAX = int(np.iinfo(np.int64).min), int(np.iinfo(np.int64).max)


def _read_csv(text: str, party: Optional[Party], epoch: Optional[int]) -> TagStream:
    lines_consumed = 0
    if text.startswith("#"):
        first, _, text = text.partition("\n")
        lines_consumed = 1
        match = _METADATA_PATTERN.match(first.strip())
        if not match:
            raise TagFormatError("Malformed metadata comment", offset=1, offset_kind="line")
        party = Party(match.group(1))
        epoch = int(match.group(2))
    party = party or Party.ALICE
    epoch = 0 if epoch is None else epoch
    if not text.strip():
        return TagStream.empty(party, epoch)

    try:
        df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        match = _PARSER_LINE_PATTERN.search(str(exc))
        line = int(match.group(1)) + lines_consumed if match else lines_consumed + 1
        raise TagFormatError("Malformed CSV record", offset=line, offset_kind="line") from exc

    header_line = lines_consumed + 1
    if [column.strip() for column in df.columns] != CSV_COLUMNS:
        raise TagFormatError(
            f"Expected header '{','.join(CSV_COLUMNS)}', found '{','.join(df.columns)}'",
            offset=header_line,
            offset_kind="line",
        )
    df.columns = CSV_COLUMNS

    names = df["channel"].str.strip()
    codes = names.map(lambda name: CHANNEL_BY_NAME[name].value if name in CHANNEL_BY_NAME else -1)
    bad = np.flatnonzero(codes.to_numpy() < 0)
    if bad.size:
        row = int(bad[0])
        raise TagFormatError(
            f"Unknown channel '{names.iloc[row]}'", offset=header_line + row + 1, offset_kind="line"
        )
    raw_ts = df["timestamp_ps"].str.strip()
    bad = np.flatnonzero(~raw_ts.str.fullmatch(r"-?\d+").to_numpy())
    if bad.size:
        row = int(bad[0])
        raise TagFormatError(
            f"Invalid timestamp '{raw_ts.iloc[row]}'", offset=header_line + row + 1, offset_kind="line"
        )
    # 19+ significant digits may not fit in int64
    digits = raw_ts.str.lstrip("-").str.lstrip("0").str.len().to_numpy()
    for row in np.flatnonzero(digits >= 19):
        if not _INT64_MIN <= int(raw_ts.iloc[row]) <= _INT64_MAX:
            raise TagFormatError(
                f"Timestamp '{raw_ts.iloc[row]}' outside the 64-bit range",
                offset=header_line + int(row) + 1,
                offset_kind="line",
            )
    return TagStream(party, raw_ts.astype(np.int64).to_numpy(), codes.to_numpy(dtype=np.uint8), epoch)


def write_tags(stream: TagStream, path: PathLike, fmt: Optional[str] = None) -> Path:
    """Serialize ``stream``; the same stream always produces identical bytes."""

    path = Path(path)
    fmt = _resolve_format(path, fmt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "binary":
            records = np.empty(len(stream), dtype=RECORD_DTYPE)
            records["channel"] = stream.channels
            records["timestamp"] = stream.timestamps
            header = HEADER_STRUCT.pack(MAGIC, FORMAT_VERSION, stream.party.code, 0, stream.epoch)
            with path.open("wb") as handle:
                handle.write(header)
                handle.write(records.tobytes())
        else:
            df = pd.DataFrame(
                {
                    "channel": [DetectorChannel(code).name for code in stream.channels.tolist()],
                    "timestamp_ps": stream.timestamps,
                },
                columns=CSV_COLUMNS,
            )
            with path.open("w", encoding="utf-8", newline="") as handle:
                handle.write(f"# party={stream.party.value} epoch={stream.epoch}\n")
                df.to_csv(handle, index=False, lineterminator="\n")
    except OSError as exc:
        raise OSError(exc.errno, f"Could not write tag file {path}: {exc.strerror or exc}") from exc
    return path


def merge_sorted(streams: Sequence[TagStream]) -> TagStream:
    """Merge same-party streams into one ordered stream."""

    streams = list(streams)
    if not streams:
        raise ValueError("merge_sorted needs at least one stream.")
    parties = {stream.party for stream in streams}
    if len(parties) > 1:
        raise StreamMismatchError(
            f"Cannot merge streams of different parties: {', '.join(sorted(p.value for p in parties))}."
        )
    epochs = {stream.epoch for stream in streams}
    if len(epochs) > 1:
        raise StreamMismatchError(f"Cannot merge streams with different epochs: {sorted(epochs)}.")
    non_empty = [stream for stream in streams if len(stream)]
    if len(non_empty) <= 1:
        return non_empty[0] if non_empty else streams[0]
    timestamps = np.concatenate([stream.timestamps for stream in non_empty])
    channels = np.concatenate([stream.channels for stream in non_empty])
    merged, _ = TagStream.from_unsorted(streams[0].party, timestamps, channels, streams[0].epoch)
    return merged


__all__ = [
    "Basis",
    "CHANNEL_BY_NAME",
    "DetectorChannel",
    "PS_PER_S",
    "Party",
    "TagStream",
    "TimeTag",
    "first_order_violation",
    "merge_sorted",
    "read_tags",
    "write_tags",
]
