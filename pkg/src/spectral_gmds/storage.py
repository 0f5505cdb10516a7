"""Versioned binary container for cached arrays.

Layout::

    magic  b"SGMDSBIN"
    u32    format version
    u32    header length, then a UTF-8 JSON header (kind, meta, array specs)
    raw little-endian array buffers in header order
    32-byte SHA-256 of everything above

Arrays keep their memory order (``phi`` is stored column-major).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"SGMDSBIN"
VERSION = 1


class CacheError(Exception):
    """Unreadable, corrupted, or mismatched cache file."""


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs, blobs = [], []
    for name, a in arrays.items():
        a = np.asarray(a)
        order = "F" if (a.ndim > 1 and a.flags.f_contiguous and not a.flags.c_contiguous) else "C"
        dt = a.dtype.newbyteorder("<")
        buf = a.astype(dt, copy=False).tobytes(order=order)
        specs.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "order": order})
        blobs.append(buf)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CacheError(f"{path}: {exc}") from None
    if len(data) < len(MAGIC) + 40 or not data.startswith(MAGIC):
        raise CacheError(f"{path}: not a cache file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CacheError(f"{path}: checksum mismatch (corrupted file)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    off = len(MAGIC) + 8
    header = json.loads(body[off:off + hlen])
    if header["kind"] != kind:
        raise CacheError(f"{path}: expected a {kind!r} cache, found {header['kind']!r}")
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype=dt, count=count, offset=off)
        arrays[spec["name"]] = a.reshape(spec["shape"], order=spec["order"]).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    return header["meta"], arrays
