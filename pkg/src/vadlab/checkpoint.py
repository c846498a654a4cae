"""Binary checkpoint container.

Layout (little-endian)::

    b"VADL"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, UTF-8 name, u8 ndim, u32 dims[ndim], float32 values

A JSON sidecar (``<path>.json``) carries the metadata needed to rebuild
the network.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"VADL"
VERSION = 1


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not a VADL checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if pos + 4 * n > len(blob):
                raise DataError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise DataError(f"checkpoint truncated: {exc}") from None
    if pos != len(blob):
        raise DataError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return out


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    Path(path).write_bytes(encode(tensors))
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    tensors = decode(Path(path).read_bytes())
    meta = json.loads(sidecar_path(path).read_text())
    return tensors, meta
