"""Binary container format shared by base-model, expert, and router checkpoints.

Layout (all integers little-endian):

    magic "MOQE" | version u16 | header_len u32 | header JSON (canonical)
    n_entries u32
    per entry: name_len u16 | name utf8 | dtype u8 | ndim u8 | dims u32*ndim
               | offset u64 | length u64
    payload bytes

dtypes: 0 = f64, 1 = i8, 2 = i4 packed two codes per byte, low nibble first.
Round trips are bit-exact: read followed by write reproduces the file.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import IntegrityError, ShapeError
from .util import canonical_json, sha256_hex

MAGIC = b"MOQE"
VERSION = 1

_DTYPE_CODES = {"f64": 0, "i8": 1, "i4": 2}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_i4(values):
    """Signed nibbles in [-8, 7], two per byte, low nibble first."""
    flat = np.asarray(values, dtype=np.int8).reshape(-1)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise ShapeError("i4 entry has codes outside [-8, 7]")
    u = (flat.astype(np.int16) & 0xF).astype(np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).tobytes()


def _unpack_i4(raw, count):
    b = np.frombuffer(raw, dtype=np.uint8)
    lo = (b & 0xF).astype(np.int8)
    hi = (b >> 4).astype(np.int8)
    nibbles = np.empty(b.size * 2, dtype=np.int8)
    nibbles[0::2] = lo
    nibbles[1::2] = hi
    nibbles = nibbles[:count]
    return np.where(nibbles >= 8, nibbles - 16, nibbles).astype(np.int8)


def _encode(dtype, array):
    if dtype == "f64":
        return np.ascontiguousarray(array, dtype="<f8").tobytes()
    if dtype == "i8":
        return np.ascontiguousarray(array, dtype=np.int8).tobytes()
    if dtype == "i4":
        return _pack_i4(array)
    raise ShapeError(f"unknown entry dtype {dtype!r}")


def _decode(dtype, raw, shape):
    count = int(np.prod(shape)) if shape else 1
    if dtype == "f64":
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if dtype == "i8":
        return np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
    return _unpack_i4(raw, count).reshape(shape)


def dumps(header, entries):
    """Serialize to bytes. entries: list of (name, dtype, ndarray)."""
    hdr = canonical_json(header).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(entries)))
    payload = io.BytesIO()
    directory = []
    for name, dtype, array in entries:
        raw = _encode(dtype, array)
        directory.append((name, dtype, np.asarray(array).shape, payload.tell(), len(raw)))
        payload.write(raw)
    for name, dtype, shape, offset, length in directory:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dtype], len(shape)))
        for d in shape:
            buf.write(struct.pack("<I", d))
        buf.write(struct.pack("<QQ", offset, length))
    buf.write(payload.getvalue())
    return buf.getvalue()


def loads(blob):
    """Parse bytes -> (header dict, entries list of (name, dtype, ndarray))."""
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise IntegrityError("bad magic: not a MOQE container")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    import json

    header = json.loads(buf.read(hlen).decode())
    (n,) = struct.unpack("<I", buf.read(4))
    directory = []
    for _ in range(n):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        code, ndim = struct.unpack("<BB", buf.read(2))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        offset, length = struct.unpack("<QQ", buf.read(16))
        directory.append((name, _DTYPE_NAMES[code], shape, offset, length))
    payload_start = buf.tell()
    entries = []
    for name, dtype, shape, offset, length in directory:
        buf.seek(payload_start + offset)
        raw = buf.read(length)
        if len(raw) != length:
            raise IntegrityError(f"truncated payload for entry {name!r}")
        entries.append((name, dtype, _decode(dtype, raw, shape)))
    return header, entries


def save(path, header, entries):
    blob = dumps(header, entries)
    with open(path, "wb") as f:
        f.write(blob)
    return sha256_hex(blob)


def load(path, expect_digest=None):
    with open(path, "rb") as f:
        blob = f.read()
    if expect_digest is not None and sha256_hex(blob) != expect_digest:
        raise IntegrityError(f"digest mismatch for {path}")
    return loads(blob)


def file_digest(path):
    with open(path, "rb") as f:
        return sha256_hex(f.read())
