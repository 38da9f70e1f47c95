"""Binary container shared by the on-disk formats.

Layout: 4-byte magic, little-endian u32 version, u32 header length, a UTF-8
JSON header, then little-endian float32 blobs. Formats that need integrity
checking append a 64-bit BLAKE2b digest of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatchError, FormatError, VersionMismatchError

F32 = np.dtype("<f4")


def checksum64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def pack(magic: bytes, version: int, header: dict, blobs, with_checksum: bool = False) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", version, len(head)), head]
    parts += [np.ascontiguousarray(b, dtype=F32).tobytes() for b in blobs]
    payload = b"".join(parts)
    if with_checksum:
        payload += checksum64(payload)
    return payload


def unpack(raw: bytes, magic: bytes, version: int, with_checksum: bool = False):
    """Return ``(header, float32 body)``; the caller slices the body."""
    if with_checksum:
        if len(raw) < 20 or checksum64(raw[:-8]) != raw[-8:]:
            raise ChecksumMismatchError("checksum mismatch (truncated or corrupted file)")
        raw = raw[:-8]
    if len(raw) < 12 or raw[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    got, hlen = struct.unpack("<II", raw[4:12])
    if got != version:
        raise VersionMismatchError(f"file version {got}, reader supports {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    body = raw[12 + hlen :]
    if len(body) % 4:
        raise FormatError("payload is not a whole number of float32 values")
    return header, np.frombuffer(body, dtype=F32)


def take(body: np.ndarray, offset: int, shape) -> tuple[np.ndarray, int]:
    size = int(np.prod(shape))
    if offset + size > body.size:
        raise FormatError("payload shorter than declared by header")
    return body[offset : offset + size].reshape(shape).copy(), offset + size


def write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
