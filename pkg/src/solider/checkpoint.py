"""Single-file checkpoint container.

Layout, all little-endian:

    magic "SOLCKPT1" | u32 count | table | u64 blob_size | blob | u32 crc32

Each table entry: u16 name length, utf-8 name, u8 dtype code, u8 ndim,
ndim x u32 dims, u64 offset into the blob, u64 byte length. The CRC covers
everything before the trailer, so any truncation or corruption is caught
before state is touched. Arbitrary metadata rides along as a JSON blob under
the reserved name "__meta__".
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"SOLCKPT1"
META_KEY = "__meta__"

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
    np.dtype("bool"): 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str, tensors: dict, meta: dict | None = None) -> None:
    entries = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    table = bytearray()
    blob = bytearray()
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(blob), len(raw))
        blob += raw
    body = MAGIC + struct.pack("<I", len(entries)) + bytes(table)
    body += struct.pack("<Q", len(blob)) + bytes(blob)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_tensors(path: str) -> tuple:
    """Returns (tensors dict, meta dict or None); verifies the checksum first."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or not raw.startswith(MAGIC):
        raise CheckpointError("not a solider checkpoint (bad magic)")
    body, trailer = raw[:-4], raw[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch: file is truncated or corrupt")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    headers = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        data_off, nbytes = struct.unpack_from("<QQ", body, off)
        off += 16
        headers.append((name, code, shape, data_off, nbytes))
    (blob_size,) = struct.unpack_from("<Q", body, off)
    off += 8
    blob = body[off:off + blob_size]
    tensors = {}
    for name, code, shape, data_off, nbytes in headers:
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        arr = np.frombuffer(blob[data_off:data_off + nbytes], dtype=dtype)
        tensors[name] = arr.astype(_CODE_DTYPES[code]).reshape(shape)
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode("utf-8"))
    return tensors, meta
