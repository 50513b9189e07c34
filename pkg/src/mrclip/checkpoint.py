"""Versioned, checksummed binary checkpoints.

Layout (little-endian)::

    b"MRCLIPCK" | u32 version | u64 header_len | header JSON | float64 blobs | sha256

The header lists every array by name and shape in blob order and carries
any JSON-serialisable extras (optimizer scalars, RNG state, log, ...).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"MRCLIPCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(Exception):
    pass


class IoFailure(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


def encode(arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> bytes:
    names = list(arrays)
    header = {
        "arrays": [[n, list(np.shape(arrays[n]))] for n in names],
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise ChecksumMismatch("file too short to be a checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("checksum does not match contents")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise ChecksumMismatch("bad magic bytes")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    off = _PREFIX.size
    header = json.loads(body[off : off + hlen])
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        off += 8 * count
    if off != len(body):
        raise ChecksumMismatch("trailing bytes after array data")
    return arrays, header["meta"]


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    data = encode(arrays, meta)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode(blob)
