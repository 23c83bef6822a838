"""Flat binary parameter container.

Layout: 4-byte magic, uint32 little-endian header length, UTF-8 JSON header
(architecture descriptor plus the ordered parameter manifest), then every
parameter as float64 little-endian in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics.tensor import Tensor

DFF_MAGIC = b"DFF1"
SEG_MAGIC = b"SEG1"


class CheckpointError(ValueError):
    pass


def encode(magic: bytes, arch: dict, params: Mapping[str, np.ndarray | Tensor]) -> bytes:
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype="<f8")
              for k, v in params.items()}
    header = {"arch": arch, "params": [[k, list(a.shape)] for k, a in arrays.items()]}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays.values())
    return magic + struct.pack("<I", len(hbytes)) + hbytes + body


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    offset = 8 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"truncated data for parameter {name!r}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after parameters")
    return header["arch"], params


def save(path: str | os.PathLike, magic: bytes, arch: dict, params) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(magic, arch, params))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
