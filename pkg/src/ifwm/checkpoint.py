"""Binary checkpoints for the parameter registry.

Layout: magic "IFWM", u32 version (currently 1), u32 record count, then per
record a u32 name length, the UTF-8 name, four u32 extents (n, c, h, w) and
the row-major little-endian f64 payload.  Values are always stored as f64;
loading casts back to whatever dtype the target registry uses.  Saving
preserves registry insertion order, so identical registries produce
byte-identical files.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from ifwm.errors import CheckpointError

MAGIC = b"IFWM"
VERSION = 1


def save_state(path: str, registry: Dict[str, "Tensor"]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(registry)))
        for name, tensor in registry.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<IIII", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int, path: str, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def load_state(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        state: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path, "name length"))
            name = _read_exact(fh, nlen, path, "name").decode("utf-8")
            shape = struct.unpack("<IIII", _read_exact(fh, 16, path, f"{name} extents"))
            payload = _read_exact(fh, 8 * int(np.prod(shape)), path, f"{name} payload")
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return state


def apply_state(registry: Dict[str, "Tensor"], state: Dict[str, np.ndarray],
                path: str = "<state>") -> None:
    """Copy loaded values into the registry; any name or shape drift is fatal."""
    missing = sorted(set(registry) - set(state))
    unexpected = sorted(set(state) - set(registry))
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: registry mismatch; missing={missing[:8]} unexpected={unexpected[:8]}")
    for name, tensor in registry.items():
        value = state[name]
        if value.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {value.shape}, registry expects {tensor.data.shape}")
        tensor.data[:] = value.astype(tensor.data.dtype)
