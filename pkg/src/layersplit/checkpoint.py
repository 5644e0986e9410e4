"""Binary checkpoint container plus JSON sidecar.

Layout of ``<name>.ckpt`` (all integers little-endian)::

    8 bytes   magic  b"LSCKPT\\x00\\x00"
    u32       format version (currently 1)
    u32       number of tensors
    per tensor:
      u16     name length n, then n bytes UTF-8 name
      u8      dtype code (0 float32, 1 float64, 2 int64)
      u8      ndim k, then k x u64 dimensions
      ...     raw C-order data
    u32       CRC-32 of every preceding byte

``<name>.ckpt.json`` carries hyperparameters and the training step.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"LSCKPT\x00\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(IOError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    os.replace(tmp, path)
    if meta is not None:
        with open(f"{os.fspath(path)}.json", "w") as fh:
            json.dump({"format_version": VERSION, **meta}, fh, indent=2, sort_keys=True)


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos, out = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed record ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return out


def read_meta(path) -> dict:
    try:
        with open(f"{os.fspath(path)}.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}.json: {exc}") from exc
    if meta.get("format_version") != VERSION:
        raise CheckpointError(f"{path}.json: format version {meta.get('format_version')}, expected {VERSION}")
    return meta
