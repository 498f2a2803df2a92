"""TNSR tensor records and CKPT checkpoint containers.

TNSR layout::

    b"TNSR" | u8 version (0x01) | u8 rank | rank x u64 LE dims | f32 LE payload

CKPT layout::

    b"CKPT" | u32 LE count | count x (u16 LE name length | UTF-8 name | TNSR record)

A JSON document is stored in a checkpoint as a rank-1 record whose elements
are its UTF-8 byte values.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError, UnsupportedVersionError

TNSR_MAGIC = b"TNSR"
CKPT_MAGIC = b"CKPT"
VERSION = 1
CONFIG_RECORD = "__config__"


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = TNSR_MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Parse one TNSR record starting at ``offset``; return ``(array, next_offset)``."""
    if len(buf) - offset < 6:
        raise FormatError("truncated TNSR header", offset)
    if buf[offset:offset + 4] != TNSR_MAGIC:
        raise FormatError("bad TNSR magic", offset)
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported TNSR version {version}", offset + 4)
    pos = offset + 6
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated TNSR dims", pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated TNSR payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    return arr, pos + nbytes


def save_tensor(array, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after TNSR record", end)
    return arr


def encode_json_record(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_json_record(arr) -> object:
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def encode_checkpoint(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"record name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict:
    if len(buf) < 8:
        raise FormatError("truncated CKPT header", 0)
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad CKPT magic", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    records = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError("truncated record name length", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < n:
            raise FormatError("truncated record name", pos)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid UTF-8", pos) from None
        pos += n
        arr, pos = decode_tensor(buf, pos)
        records[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", pos)
    return records


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: dict | None = None) -> None:
    records = {}
    if config is not None:
        records[CONFIG_RECORD] = encode_json_record(config)
    for name, arr in params.items():
        records[name] = arr
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(records))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, config)``; ``config`` is None when absent."""
    with open(path, "rb") as fh:
        records = decode_checkpoint(fh.read())
    config = None
    if CONFIG_RECORD in records:
        config = decode_json_record(records.pop(CONFIG_RECORD))
    return records, config
