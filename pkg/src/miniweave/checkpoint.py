"""Named-tensor container ("MWV1") with JSON metadata.

Layout (little-endian)::

    b"MWV1" | u32 version | u32 crc32(body) | body
    body = u32 meta_len | meta JSON | u32 count | count x entry
    entry = u16 name_len | name utf-8 | u8 dtype (0 = float32) | u8 ndim | ndim x u32 | payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MWV1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def dumps(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return MAGIC + struct.pack("<II", VERSION, zlib.crc32(body)) + body


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, crc = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = memoryview(blob)[12:]
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt (checksum mismatch)")
    try:
        pos = 0
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(bytes(body[pos : pos + mlen]))
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = bytes(body[pos : pos + nlen]).decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(bytes(body[pos : pos + n]), dtype=dtype).reshape(shape).astype(np.float32)
            pos += n
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, metadata))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes())


def diff(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> list[str]:
    """Names whose tensors differ (bitwise) or exist on one side only."""
    names = set(a) | set(b)
    return sorted(n for n in names if n not in a or n not in b or a[n].shape != b[n].shape or a[n].tobytes() != b[n].tobytes())
