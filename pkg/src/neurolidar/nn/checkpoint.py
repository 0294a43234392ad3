"""NLNN parameter checkpoints and NLOS optimizer state files (little-endian).

NLNN: "NLNN", u32 version, u32 count, then per parameter u16 name length, UTF-8
name, u8 rank, u32 dims[rank], f32 values.
NLOS: "NLOS", u32 version, u32 step, f64 base_lr, f64 lr, f64 mu_product,
u32 total_epochs, u32 count, then per parameter the NLNN-style header followed
by f32 first moment and f32 second moment.
"""
import struct

import numpy as np

from ..errors import ParseError
from .optim import OptimizerState

NLNN_MAGIC = b"NLNN"
NLOS_MAGIC = b"NLOS"
VERSION = 1


def _pack_entry(name, arrays):
    raw = name.encode("utf-8")
    shape = arrays[0].shape
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<B", len(shape)),
           struct.pack(f"<{len(shape)}I", *shape)]
    out += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(out)


def _unpack_entry(buf, off, n_arrays):
    try:
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        if len(name.encode("utf-8")) != ln:
            raise ParseError("truncated parameter name", off)
        off += ln
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
    except struct.error as exc:
        raise ParseError(f"truncated entry header: {exc}", off) from exc
    size = int(np.prod(dims)) if rank else 1
    arrays = []
    for _ in range(n_arrays):
        if len(buf) - off < 4 * size:
            raise ParseError(f"truncated values for {name!r}", off)
        arrays.append(np.frombuffer(buf, "<f4", size, off).reshape(dims).astype(np.float32))
        off += 4 * size
    return name, arrays, off


def encode_params(state):
    parts = [NLNN_MAGIC, struct.pack("<II", VERSION, len(state))]
    parts += [_pack_entry(name, [arr]) for name, arr in state.items()]
    return b"".join(parts)


def decode_params(buf):
    if buf[:4] != NLNN_MAGIC:
        raise ParseError(f"bad magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 12:
        raise ParseError("truncated header", len(buf))
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    off, state = 12, {}
    for _ in range(count):
        name, (arr,), off = _unpack_entry(buf, off, 1)
        state[name] = arr
    if off != len(buf):
        raise ParseError("trailing bytes", off)
    return state


def save_params(module, path):
    with open(path, "wb") as fh:
        fh.write(encode_params(module.state_dict()))


def load_params(module, path):
    with open(path, "rb") as fh:
        module.load_state_dict(decode_params(fh.read()))
    return module


def encode_optimizer(state):
    names = list(state.m)
    head = NLOS_MAGIC + struct.pack("<IIdddII", VERSION, state.step, state.base_lr, state.lr,
                                    state.mu_product, int(state.schedule["total_epochs"]),
                                    len(names))
    return head + b"".join(_pack_entry(n, [state.m[n], state.v[n]]) for n in names)


def decode_optimizer(buf):
    if buf[:4] != NLOS_MAGIC:
        raise ParseError(f"bad magic {bytes(buf[:4])!r}", 0)
    fmt = "<IIdddII"
    if len(buf) < 4 + struct.calcsize(fmt):
        raise ParseError("truncated header", len(buf))
    version, step, base_lr, lr, mu_prod, total, count = struct.unpack_from(fmt, buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    st = OptimizerState(base_lr, lr=lr, step=step, mu_product=mu_prod)
    st.schedule["total_epochs"] = total
    off = 4 + struct.calcsize(fmt)
    for _ in range(count):
        name, (m, v), off = _unpack_entry(buf, off, 2)
        st.m[name] = m
        st.v[name] = v
    if off != len(buf):
        raise ParseError("trailing bytes", off)
    return st
