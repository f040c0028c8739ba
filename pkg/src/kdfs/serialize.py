"""Binary container for models and checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic "KDFS"
    u32          format version (currently 1)
    u32          descriptor length, then that many bytes of JSON
    u32          tensor block count
    per block:   u16 name length + name bytes,
                 u8 dtype code (0=f32, 1=f64, 2=i64, 3=u8),
                 u8 ndim, ndim * u32 dims,
                 raw little-endian payload
    final 8 B    blake2b-64 checksum of every preceding byte

Serialization is canonical (sorted JSON keys, fixed field order), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptionError, FormatError, VersionError

MAGIC = b"KDFS"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def serialize(descriptor: dict, arrays: dict[str, np.ndarray]) -> bytes:
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nameb = name.encode()
        parts.append(struct.pack("<H", len(nameb)))
        parts.append(nameb)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    blob = b"".join(parts)
    return blob + _checksum(blob)


def deserialize(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise CorruptionError("checksum mismatch: file is damaged")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise VersionError(f"format version {version} not supported (expected {VERSION})")
    (dlen,) = struct.unpack_from("<I", body, off)
    off += 4
    descriptor = json.loads(body[off:off + dlen].decode())
    off += dlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(body[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes after last tensor block")
    return descriptor, arrays


def save(path, descriptor: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(descriptor, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
