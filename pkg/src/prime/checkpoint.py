"""Versioned binary checkpoint container: named f64 tensors plus a config
fingerprint, deterministic byte-for-byte for identical inputs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PRIMECK1"
VERSION = 1


def save_checkpoint(path: Path, tensors: dict[str, np.ndarray],
                    fingerprint: str, kind: str, meta: dict | None = None) -> None:
    names = sorted(tensors)
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "version": VERSION,
        "config_fingerprint": fingerprint,
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte offset 0")
    version = struct.unpack("<I", buf[8:12])[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", buf[12:20])[0]
    if 20 + hlen > len(buf):
        raise FormatError(f"{path}: truncated header at byte offset 20")
    header = json.loads(buf[20 : 20 + hlen].decode())
    payload = buf[20 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + count * 8
        if hi > len(payload):
            raise FormatError(
                f"{path}: truncated tensor {entry['name']} at byte offset {20 + hlen + lo}"
            )
        tensors[entry["name"]] = (
            np.frombuffer(payload[lo:hi], dtype="<f8").reshape(shape).copy()
        )
    return tensors, header
