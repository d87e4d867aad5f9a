"""Event records, event streams and the on-disk event formats.

An event is ``(t, x, y, p)``: a timestamp in integer microseconds, the pixel
column and row, and a polarity of +1 (ON, brightness increase) or -1 (OFF).
Streams keep their events as parallel numpy arrays so that simulators and
frame builders can work on millions of events without Python-level loops.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

BINARY_MAGIC = b"EVK1"
BINARY_HEADER = struct.Struct("<4sIII")

# one 16-byte record per event, little-endian, 3 zero pad bytes at the end
EVENT_RECORD_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p"],
        "formats": ["<u8", "<u2", "<u2", "i1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)

CSV_HEADER = "t,x,y,p"


class EventFormatError(ValueError):
    """Raised when an event file cannot be parsed or does not match its header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EventFormat(enum.Enum):
    CSV = "csv"
    BINARY = "binary"

    @classmethod
    def from_path(cls, path: str | Path) -> "EventFormat":
        suffix = Path(path).suffix.lower()
        if suffix in (".csv", ".txt"):
            return cls.CSV
        if suffix in (".bin", ".evk", ".dat"):
            return cls.BINARY
        raise ValueError(f"cannot infer event format from suffix {suffix!r}")


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    index: int | None = None
    kind: str | None = None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "OK"
        return f"{self.kind} at index {self.index}"


def _frozen(a, dtype) -> np.ndarray:
    # read-only inputs of the right dtype are shared, anything else is copied
    if isinstance(a, np.ndarray) and a.dtype == dtype and not a.flags.writeable:
        out = a
    else:
        out = np.array(a, dtype=dtype)
        out.flags.writeable = False
    if out.ndim != 1:
        raise ValueError("event fields must be one-dimensional")
    return out


class EventStream:
    """Immutable sequence of events on a ``width`` x ``height`` sensor.

    Construction does not enforce ordering or bounds; call :func:`validate`
    for that. Every operation in this package that produces a stream
    produces a valid one.
    """

    __slots__ = ("width", "height", "t", "x", "y", "p")

    def __init__(self, width: int, height: int, t=(), x=(), y=(), p=()):
        self.width = int(width)
        self.height = int(height)
        self.t = _frozen(t, np.int64)
        self.x = _frozen(x, np.int32)
        self.y = _frozen(y, np.int32)
        self.p = _frozen(p, np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")

    @classmethod
    def _adopt(cls, width: int, height: int, t, x, y, p) -> "EventStream":
        """Wrap freshly built arrays without copying; the caller gives them up."""
        for a in (t, x, y, p):
            a.flags.writeable = False
        return cls(width, height, t, x, y, p)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(width, height)

    @classmethod
    def from_events(cls, width: int, height: int, events: Iterable[Event | tuple]) -> "EventStream":
        rows = [tuple(e) for e in events]
        if not rows:
            return cls(width, height)
        t, x, y, p = (np.asarray(col) for col in zip(*rows))
        return cls(width, height, t, x, y, p)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"

    @property
    def duration(self) -> int:
        """Time between first and last event in microseconds (0 when empty)."""
        if len(self) == 0:
            return 0
        return int(self.t[-1] - self.t[0])

    def pixel_index(self) -> np.ndarray:
        """Row-major flat pixel index of every event."""
        return self.y.astype(np.int64) * self.width + self.x


def validate(stream: EventStream) -> ValidationResult:
    """Check ordering and bounds, reporting the first violation found.

    Events are scanned in order; for each index the bounds check comes
    before the ordering check against the previous event.
    """
    n = len(stream)
    if n == 0:
        return ValidationResult(True)
    bad_bounds = (
        (stream.x < 0) | (stream.x >= stream.width) | (stream.y < 0) | (stream.y >= stream.height)
    )
    bad_order = np.zeros(n, dtype=bool)
    bad_order[1:] = stream.t[1:] < stream.t[:-1]
    bad_t = stream.t < 0
    bad_p = (stream.p != 1) & (stream.p != -1)
    candidates = []
    for mask, kind in (
        (bad_bounds, "out of bounds"),
        (bad_t, "negative timestamp"),
        (bad_p, "invalid polarity"),
        (bad_order, "unsorted"),
    ):
        hits = np.flatnonzero(mask)
        if hits.size:
            candidates.append((int(hits[0]), kind))
    if not candidates:
        return ValidationResult(True)
    order = {"out of bounds": 0, "negative timestamp": 1, "invalid polarity": 2, "unsorted": 3}
    index, kind = min(candidates, key=lambda c: (c[0], order[c[1]]))
    return ValidationResult(False, index, kind)


def slice_events(stream: EventStream, t0: float, t1: float) -> EventStream:
    """Events with ``t0 <= t < t1``; the stream must be time-sorted."""
    if t0 > t1:
        raise ValueError(f"invalid window [{t0}, {t1})")
    lo = _search(stream.t, t0)
    hi = _search(stream.t, t1)
    return _take_range(stream, lo, hi)


def _search(t: np.ndarray, value: float) -> int:
    if math.isinf(value):
        return 0 if value < 0 else len(t)
    # ceil so a fractional bound behaves like the half-open real interval
    return int(np.searchsorted(t, math.ceil(value), side="left"))


def _take_range(stream: EventStream, lo: int, hi: int) -> EventStream:
    return EventStream(
        stream.width, stream.height, stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi]
    )


def merge(a: EventStream, b: EventStream) -> EventStream:
    """Time-ordered union of two streams; ``a`` wins ties."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    # slot of each b event after every a event with t <= its own
    pos_b = np.searchsorted(a.t, b.t, side="right") + np.arange(len(b))
    n = len(a) + len(b)
    from_a = np.ones(n, dtype=bool)
    from_a[pos_b] = False
    fields = []
    for fa, fb in ((a.t, b.t), (a.x, b.x), (a.y, b.y), (a.p, b.p)):
        out = np.empty(n, dtype=fa.dtype)
        out[from_a] = fa
        out[pos_b] = fb
        fields.append(out)
    return EventStream._adopt(a.width, a.height, *fields)


def concatenate_sorted(streams: list[EventStream]) -> EventStream:
    """Merge several same-sized streams by timestamp, stable in list order."""
    w, h = streams[0].width, streams[0].height
    t = np.concatenate([s.t for s in streams])
    order = np.argsort(t, kind="stable")
    return EventStream._adopt(
        w,
        h,
        t[order],
        np.concatenate([s.x for s in streams])[order],
        np.concatenate([s.y for s in streams])[order],
        np.concatenate([s.p for s in streams])[order],
    )


# ---------------------------------------------------------------- file I/O


def write_events(stream: EventStream, path: str | Path, fmt: EventFormat | str | None = None) -> None:
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt is EventFormat.BINARY:
        path.write_bytes(_encode_binary(stream))
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            if len(stream):
                data = np.column_stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)])
                np.savetxt(fh, data, fmt="%d", delimiter=",")


def read_events(
    path: str | Path,
    fmt: EventFormat | str | None = None,
    width: int | None = None,
    height: int | None = None,
) -> EventStream:
    """Load an event file.

    BINARY files carry their own dimensions; passing ``width``/``height``
    asserts them. CSV files carry none, so when omitted the sensor size is
    taken as the smallest one containing every event.
    """
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt is EventFormat.BINARY:
        stream = _decode_binary(path.read_bytes())
        if width is not None and width != stream.width or height is not None and height != stream.height:
            raise EventFormatError(
                f"header dimensions {stream.width}x{stream.height} do not match expected {width}x{height}"
            )
        return stream
    return _read_csv(path, width, height)


def _resolve_format(path: Path, fmt) -> EventFormat:
    if fmt is None:
        return EventFormat.from_path(path)
    if isinstance(fmt, str):
        return EventFormat(fmt.lower())
    return fmt


def _encode_binary(stream: EventStream) -> bytes:
    header = BINARY_HEADER.pack(BINARY_MAGIC, stream.width, stream.height, 0)
    rec = np.zeros(len(stream), dtype=EVENT_RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return header + rec.tobytes()


def _decode_binary(raw: bytes) -> EventStream:
    if len(raw) < BINARY_HEADER.size:
        raise EventFormatError("file shorter than the 16-byte header")
    magic, width, height, _reserved = BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}")
    body = len(raw) - BINARY_HEADER.size
    if body % EVENT_RECORD_DTYPE.itemsize:
        raise EventFormatError(
            f"truncated record {body // EVENT_RECORD_DTYPE.itemsize}: body is {body} bytes"
        )
    rec = np.frombuffer(raw, dtype=EVENT_RECORD_DTYPE, offset=BINARY_HEADER.size)
    p = rec["p"]
    bad = np.flatnonzero((p != 1) & (p != -1))
    if bad.size:
        raise EventFormatError(f"record {bad[0]}: polarity {p[bad[0]]} not in {{1, -1}}")
    x, y = rec["x"], rec["y"]
    oob = np.flatnonzero((x >= width) | (y >= height))
    if oob.size:
        raise EventFormatError(f"record {oob[0]}: event outside {width}x{height} sensor")
    return EventStream(width, height, rec["t"].astype(np.int64), x, y, p)


def _read_csv(path: Path, width: int | None, height: int | None) -> EventStream:
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip().replace(" ", "") != CSV_HEADER:
        raise EventFormatError(f"expected header {CSV_HEADER!r}", line=1)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if body:
        try:
            data = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", dtype=np.int64, ndmin=2)
            if data.shape[1] != 4:
                raise ValueError
        except ValueError:
            _raise_first_bad_line(body)
            raise
    else:
        data = np.zeros((0, 4), dtype=np.int64)
    t, x, y, p = data.T
    bad = np.flatnonzero((p != 1) & (p != 0) & (p != -1))
    if bad.size:
        raise EventFormatError(f"polarity {p[bad[0]]} not in {{1, 0, -1}}", line=int(bad[0]) + 2)
    bad = np.flatnonzero((t < 0) | (x < 0) | (y < 0))
    if bad.size:
        raise EventFormatError("negative field", line=int(bad[0]) + 2)
    p = np.where(p == 1, 1, -1)
    w = width if width is not None else (int(x.max()) + 1 if len(x) else 0)
    h = height if height is not None else (int(y.max()) + 1 if len(y) else 0)
    oob = np.flatnonzero((x >= w) | (y >= h))
    if oob.size:
        raise EventFormatError(f"event outside {w}x{h} sensor", line=int(oob[0]) + 2)
    return EventStream(w, h, t, x, y, p)


def _raise_first_bad_line(body: list[str]) -> None:
    for i, line in enumerate(body, start=2):
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            [int(v) for v in parts]
        except ValueError:
            raise EventFormatError(f"malformed event line {line!r}", line=i) from None
