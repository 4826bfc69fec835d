"""Versioned binary container for named float/int arrays plus a JSON header.

Layout (little-endian)::

    magic (8 bytes) | format version (u32) | header length (u64) | header JSON | payload

The header lists every array's name, dtype, shape and byte offset into the
payload, a CRC-32 of the payload, and free-form metadata. The encoding is
byte-deterministic: identical inputs produce identical files.
"""

import json
import struct
import zlib

import numpy as np

from .errors import LoadError

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def dump(magic, meta, arrays):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta, "arrays": entries, "crc32": zlib.crc32(payload)}, sort_keys=True).encode()
    return _PREFIX.pack(magic, FORMAT_VERSION, len(header)) + header + payload


def load(blob, magic):
    if len(blob) < _PREFIX.size:
        raise LoadError("truncated file")
    got_magic, version, header_len = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise LoadError(f"wrong file type (magic {got_magic!r}, expected {magic!r})")
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise LoadError("corrupt header") from None
    payload = blob[start + header_len :]
    if zlib.crc32(payload) != header.get("crc32"):
        raise LoadError("payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["meta"], arrays
