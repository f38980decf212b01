"""DCKP checkpoint container.

Layout: magic "DERACKPT", u32 version=1, u32 JSON byte length, UTF-8 JSON
metadata (config + training state, canonical key order), u32 tensor
count, then per tensor {u16 name length, UTF-8 name, u8 ndim, u32 dims...,
f32 LE row-major data}.  Tensors are written in sorted name order, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

DCKP_MAGIC = b"DERACKPT"
DCKP_VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed DCKP payload."""


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DCKP_MAGIC)
        fh.write(struct.pack("<II", DCKP_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise CheckpointFormatError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointFormatError(f"tensor rank too large for {name}")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != DCKP_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    version, meta_len = struct.unpack("<II", raw[8:16])
    if version != DCKP_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = 16
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", raw[pos:pos + 2])
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = raw[pos]
        pos += 1
        dims = struct.unpack(f"<{ndim}I", raw[pos:pos + 4 * ndim]) if ndim else ()
        pos += 4 * ndim
        n_items = int(np.prod(dims)) if dims else 1
        end = pos + 4 * n_items
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
    return meta, tensors
