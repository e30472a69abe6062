"""Binary container for named arrays.

Layout (all little-endian): 4-byte magic, u32 version, u32 section count,
then one table entry per array (u16 name length, utf-8 name, u8 dtype code,
u8 ndim, u32 dims, u64 absolute data offset, u64 byte length), then the raw
array data in table order. Three dtypes keep parsing trivial in any
language: float32 (0), int32 (1), uint8 (2).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ValidationError

MAGIC = b"DSAF"
VERSION = 1

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}


def _coerce(name, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.dtype("<f4"):
        return 0, arr
    if arr.dtype == np.dtype("<i4"):
        return 1, arr
    if arr.dtype == np.dtype("u1"):
        return 2, arr
    if arr.dtype.kind == "f":
        return 0, arr.astype("<f4")
    if arr.dtype.kind in "iu":
        return 1, arr.astype("<i4")
    if arr.dtype.kind == "b":
        return 2, arr.astype("u1")
    raise ValidationError(f"array {name!r}: unsupported dtype {arr.dtype}")


def save_arrays(path, arrays):
    """Write a name -> array mapping; float arrays stored as float32."""
    entries = []
    for name, arr in arrays.items():
        code, data = _coerce(name, arr)
        entries.append((name, code, np.ascontiguousarray(data)))

    table = b""
    header_base = 4 + 4 + 4
    # first pass with zero offsets just to size the table
    sizes = []
    for name, code, data in entries:
        nb = name.encode("utf-8")
        sizes.append(2 + len(nb) + 1 + 1 + 4 * data.ndim + 8 + 8)
    offset = header_base + sum(sizes)

    for name, code, data in entries:
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", code, data.ndim)
        table += struct.pack(f"<{data.ndim}I", *data.shape)
        table += struct.pack("<QQ", offset, data.nbytes)
        offset += data.nbytes

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        fh.write(table)
        for _, _, data in entries:
            fh.write(data.tobytes())


def load_arrays(path):
    """Read a container back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ValidationError(f"{path}: file shorter than header")
    if blob[:4] != MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}, expected {VERSION}")

    out = {}
    pos = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            offset, nbytes = struct.unpack_from("<QQ", blob, pos)
            pos += 16
        except struct.error as exc:
            raise ValidationError(f"{path}: truncated section table: {exc}") from exc
        if code not in _CODES:
            raise ValidationError(f"{path}: section {name!r} has unknown dtype code {code}")
        dtype = _CODES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise ValidationError(
                f"{path}: section {name!r} declares {nbytes} bytes, shape needs {expected}"
            )
        if offset + nbytes > len(blob):
            raise ValidationError(
                f"{path}: section {name!r} data truncated "
                f"(needs bytes up to {offset + nbytes}, file has {len(blob)})"
            )
        out[name] = np.frombuffer(blob[offset : offset + nbytes], dtype=dtype).reshape(shape)
    return out
