"""Named-tensor container shared by checkpoints, codebooks and chunk stores.

Layout::

    b"DANET1"                       magic
    uint32 little-endian            header length in bytes
    UTF-8 JSON header               {"version", "meta", "tensors": [{name, dtype, shape, offset}]}
    payload                         raw little-endian float32, offsets relative to payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DANET1"
VERSION = 1
_DTYPE = "<f4"


class FormatError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None):
    table = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        table.append({"name": name, "dtype": "float32", "shape": list(data.shape),
                      "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def load_tensors(path) -> tuple[dict, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a DANET1 tensor file")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise FormatError(f"{path}: truncated DANET1 header")
    (hlen,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    if len(blob) < pos + hlen:
        raise FormatError(f"{path}: truncated DANET1 header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt DANET1 header ({exc})") from exc
    if header.get("version") != VERSION:
        raise FormatError(
            f"{path}: DANET1 version {header.get('version')} unsupported (expected {VERSION})")
    payload = memoryview(blob)[pos + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "float32" or any(d < 0 for d in shape):
            raise FormatError(f"{path}: tensor {entry['name']!r} has invalid dtype/shape")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if start + n > len(payload):
            raise FormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:start + n], dtype=_DTYPE).reshape(shape).copy()
    return tensors, header.get("meta", {})
