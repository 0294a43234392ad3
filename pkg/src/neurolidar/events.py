"""Event streams: storage, slicing, dense representations and the EVT1 codec."""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import GeometryError, ParseError

EVT_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHQ")
EVENT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert EVENT_RECORD.itemsize == 13

_I32_MAX = np.iinfo(np.int32).max


def _column(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events for an (H, W) sensor, stored column-wise.

    ``t`` holds integer microseconds, ``p`` is +1/-1.
    """
    height: int
    width: int
    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        cols = {"t": (self.t, np.int64), "x": (self.x, np.uint16),
                "y": (self.y, np.uint16), "p": (self.p, np.int8)}
        for name, (arr, dtype) in cols.items():
            arr = _column(arr, dtype)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValueError("event columns differ in length")
        if not (0 < self.height <= 0xFFFF and 0 < self.width <= 0xFFFF):
            raise GeometryError(f"invalid geometry {self.height}x{self.width}")
        if n:
            if self.t[0] < 0:
                raise ValueError("negative timestamp")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events are not sorted by timestamp")
            if np.any((self.p != 1) & (self.p != -1)):
                raise ValueError("polarity must be +1 or -1")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise GeometryError(
                    f"event coordinate outside {self.height}x{self.width}")

    @classmethod
    def empty(cls, height, width):
        return cls(height, width, np.empty(0, np.int64), np.empty(0, np.uint16),
                   np.empty(0, np.uint16), np.empty(0, np.int8))

    @classmethod
    def from_records(cls, height, width, records):
        """Build from an iterable of (t, x, y, p) tuples."""
        arr = np.array(list(records), dtype=np.int64).reshape(-1, 4)
        return cls(height, width, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @property
    def geometry(self):
        return (self.height, self.width)

    def __len__(self):
        return int(self.t.shape[0])

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.geometry == other.geometry
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in "txyp"))

    __hash__ = None

    def span(self):
        """(first, last) timestamp, or None for an empty stream."""
        if not len(self):
            return None
        return int(self.t[0]), int(self.t[-1])


@dataclass(frozen=True)
class EventSlice:
    """Events of ``stream`` with ``t_start <= t < t_end`` (indices ``lo:hi``)."""
    stream: EventStream = field(repr=False)
    t_start: int
    t_end: int
    lo: int
    hi: int

    @property
    def t(self):
        return self.stream.t[self.lo:self.hi]

    @property
    def x(self):
        return self.stream.x[self.lo:self.hi]

    @property
    def y(self):
        return self.stream.y[self.lo:self.hi]

    @property
    def p(self):
        return self.stream.p[self.lo:self.hi]

    @property
    def geometry(self):
        return self.stream.geometry

    def __len__(self):
        return self.hi - self.lo

    def __eq__(self, other):
        if not isinstance(other, EventSlice):
            return NotImplemented
        return (self.t_start == other.t_start and self.t_end == other.t_end
                and self.geometry == other.geometry
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in "txyp"))

    __hash__ = None


@dataclass(frozen=True)
class EventFrame:
    values: np.ndarray

    @property
    def geometry(self):
        return self.values.shape


@dataclass(frozen=True)
class EventVoxelGrid:
    values: np.ndarray

    @property
    def bins(self):
        return self.values.shape[0]

    @property
    def geometry(self):
        return self.values.shape[1:]


def slice_stream(stream, t_start, t_end):
    t_start, t_end = int(t_start), int(t_end)
    if t_end <= t_start:
        raise ValueError(f"empty or reversed interval [{t_start}, {t_end})")
    if isinstance(stream, EventSlice):
        base, lo0, hi0 = stream.stream, stream.lo, stream.hi
        t_start = max(t_start, stream.t_start)
        t_end = min(t_end, stream.t_end)
        if t_end <= t_start:
            return EventSlice(base, t_start, max(t_end, t_start + 1), lo0, lo0)
    else:
        base, lo0, hi0 = stream, 0, len(stream)
    ts = base.t[lo0:hi0]
    lo = lo0 + int(np.searchsorted(ts, t_start, side="left"))
    hi = lo0 + int(np.searchsorted(ts, t_end, side="left"))
    return EventSlice(base, t_start, t_end, lo, hi)


def _check_geometry(sl, geometry):
    height, width = geometry
    if len(sl) == 0:
        return
    if int(sl.x.max()) >= width or int(sl.y.max()) >= height:
        raise GeometryError(
            f"slice has events outside geometry {height}x{width}")
    if len(sl) > _I32_MAX:
        raise OverflowError("slice too large for 32-bit accumulation")


def build_event_frame(sl, geometry=None, backend=None):
    """Per-pixel sum of polarities over the slice."""
    geometry = tuple(geometry or sl.geometry)
    _check_geometry(sl, geometry)
    values = kernels.accumulate_frame(sl.x, sl.y, sl.p, geometry[0], geometry[1],
                                      backend=backend)
    return EventFrame(values)


def build_voxel_grid(sl, bins=5, geometry=None, backend=None):
    """Polarity sums split into ``bins`` equal temporal bins of the slice interval."""
    if bins < 1:
        raise ValueError("voxel grid needs at least one bin")
    if sl.t_end <= sl.t_start:
        raise ValueError("degenerate slice interval")
    geometry = tuple(geometry or sl.geometry)
    _check_geometry(sl, geometry)
    values = kernels.accumulate_voxel(sl.t, sl.x, sl.y, sl.p, sl.t_start, sl.t_end,
                                      int(bins), geometry[0], geometry[1],
                                      backend=backend)
    return EventVoxelGrid(values)


def window_iterator(stream, delta, t0=None, t_stop=None):
    """Consecutive half-open windows of length ``delta`` covering the stream.

    ``t0`` defaults to the first event timestamp and ``t_stop`` to one past the
    last, so every event lands in exactly one window.
    """
    delta = int(delta)
    if delta <= 0:
        raise ValueError("window length must be positive")
    span = stream.span()
    if t0 is None:
        if span is None:
            return
        t0 = span[0]
    if t_stop is None:
        if span is None:
            return
        t_stop = span[1] + 1
    start = int(t0)
    while start < t_stop:
        yield slice_stream(stream, start, start + delta)
        start += delta


def encode_events(stream):
    rec = np.empty(len(stream), dtype=EVENT_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return _HEADER.pack(EVT_MAGIC, stream.height, stream.width, len(stream)) + rec.tobytes()


def decode_events(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise ParseError("truncated header", 0)
    magic, height, width, count = _HEADER.unpack_from(buf, 0)
    if magic != EVT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    body = len(buf) - _HEADER.size
    need = count * EVENT_RECORD.itemsize
    if body < need:
        done = body // EVENT_RECORD.itemsize
        raise ParseError(f"truncated record {done} of {count}",
                         _HEADER.size + done * EVENT_RECORD.itemsize)
    if body > need:
        raise ParseError("trailing bytes after last record", _HEADER.size + need)
    rec = np.frombuffer(buf, dtype=EVENT_RECORD, count=count, offset=_HEADER.size)
    p = rec["p"]
    bad = np.flatnonzero((p != 1) & (p != -1))
    if bad.size:
        raise ParseError(f"invalid polarity {int(p[bad[0]])}",
                         _HEADER.size + int(bad[0]) * 13 + 12)
    t = rec["t"]
    if t.size and t.max() > np.iinfo(np.int64).max:
        raise ParseError("timestamp exceeds int64 range", _HEADER.size)
    t = t.astype(np.int64)
    back = np.flatnonzero(np.diff(t) < 0)
    if back.size:
        raise ParseError("timestamps not monotone",
                         _HEADER.size + (int(back[0]) + 1) * 13)
    try:
        return EventStream(height, width, t, rec["x"], rec["y"], p)
    except (ValueError, GeometryError) as exc:
        raise ParseError(str(exc), _HEADER.size) from exc


def write_events(stream, destination):
    data = encode_events(stream)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        with open(destination, "wb") as fh:
            fh.write(data)


def read_events(source):
    if hasattr(source, "read"):
        return decode_events(source.read())
    with open(source, "rb") as fh:
        return decode_events(fh.read())


def merge_streams(height, width, parts):
    """Concatenate column tuples and stable-sort by time."""
    parts = [p for p in parts if len(p[0])]
    if not parts:
        return EventStream.empty(height, width)
    t = np.concatenate([p[0] for p in parts]).astype(np.int64)
    order = np.argsort(t, kind="stable")
    cols = [np.concatenate([p[i] for p in parts])[order] for i in (1, 2, 3)]
    return EventStream(height, width, t[order], *cols)
