"""Depth rasters and the ELDR file format."""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

ELDR_MAGIC = b"ELDR"
_HEADER = struct.Struct("<4sHHQf")


@dataclass(frozen=True)
class DepthFrame:
    """Metric z-depth raster (float32 meters, 0 = invalid) captured at ``timestamp`` µs."""
    values: np.ndarray = field(repr=False)
    timestamp: int

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"depth raster must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("depth values must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def geometry(self):
        return self.values.shape

    @property
    def valid(self):
        return self.values > 0

    def retimed(self, timestamp):
        return DepthFrame(self.values, timestamp)

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return self.timestamp == other.timestamp and np.array_equal(self.values, other.values)

    __hash__ = None


def encode_depth(frame, scale=1.0):
    h, w = frame.geometry
    data = (frame.values / np.float32(scale)).astype("<f4")
    return _HEADER.pack(ELDR_MAGIC, h, w, frame.timestamp, scale) + data.tobytes()


def decode_depth(buf, offset=0):
    """Decode one ELDR record starting at ``offset``; returns (frame, next_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise ParseError("truncated depth header", offset)
    magic, h, w, ts, scale = _HEADER.unpack_from(buf, offset)
    if magic != ELDR_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset)
    start = offset + _HEADER.size
    n = h * w * 4
    if len(buf) - start < n:
        raise ParseError("truncated depth raster", len(buf))
    vals = np.frombuffer(buf, dtype="<f4", count=h * w, offset=start).reshape(h, w)
    if not np.isfinite(scale) or scale <= 0:
        raise ParseError(f"invalid depth scale {scale}", offset + 16)
    vals = vals * np.float32(scale)
    if not np.all(np.isfinite(vals)) or np.any(vals < 0):
        raise ParseError("negative or non-finite depth value", start)
    return DepthFrame(vals, ts), start + n


def write_depth_frames(frames, path, scale=1.0):
    """Write frames back to back in one file."""
    with open(path, "wb") as fh:
        for f in frames:
            fh.write(encode_depth(f, scale))


def read_depth_frames(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    frames, off = [], 0
    while off < len(buf):
        f, off = decode_depth(buf, off)
        frames.append(f)
    return frames
