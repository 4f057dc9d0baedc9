"""Binary checkpoint format.

Layout, all integers little-endian uint32::

    b"MHIT" | version | count | record * count | crc32

    record = name_len | name (utf-8) | rank | dim * rank | float32 data

The CRC-32 covers every byte before it. Parameters and batch-norm buffers are
stored in module traversal order, so saving the same network twice gives the
same bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, UnsupportedVersionError
from .layers import Module

MAGIC = b"MHIT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode_state(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16:
        raise FormatError(f"checkpoint too short ({len(buf)} bytes)", len(buf))
    body, (crc,) = buf[:-4], _U32.unpack(buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint CRC-32 mismatch; file is corrupted")
    if body[:4] != MAGIC:
        raise FormatError(f"bad magic {body[:4]!r}", 0)
    (version,) = _U32.unpack_from(body, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})", 4)
    (count,) = _U32.unpack_from(body, 8)
    pos = 12
    state = {}

    def u32():
        nonlocal pos
        if pos + 4 > len(body):
            raise FormatError("truncated record", pos)
        (v,) = _U32.unpack_from(body, pos)
        pos += 4
        return v

    for _ in range(count):
        start = pos
        n = u32()
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        if name in state:
            raise FormatError(f"duplicate parameter name {name!r}", start)
        dims = tuple(u32() for _ in range(u32()))
        size = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + size > len(body):
            raise FormatError(f"truncated data for {name!r}", pos)
        state[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += size
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last record", pos)
    return state


def save_checkpoint(path, net: Module) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_state(net.state_dict()))


def load_checkpoint(path, net: Module) -> Module:
    """Restore ``net`` in place. A missing, extra, or mis-shaped entry raises
    :class:`DimensionError` naming the parameter."""
    with open(path, "rb") as fh:
        state = decode_state(fh.read())
    own = net.state_dict()
    for name, value in state.items():
        if name in own and own[name].shape != value.shape:
            raise DimensionError(f"parameter {name!r}: checkpoint shape {value.shape}, model shape {own[name].shape}")
    net.load_state_dict(state)
    return net
