"""Binary checkpoint files: named float64 arrays with a versioned header.

Layout (all integers little-endian):

    magic   8 bytes  b"TXFCKPT\\0"
    version u32      format version, currently 1
    count   u32      number of records
    record  repeated count times:
        name_len u16, name utf-8 bytes
        ndim     u8,  dims u64 * ndim
        payload  float64 little-endian, C order

Records preserve insertion order so round-trips are byte-stable.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

MAGIC = b"TXFCKPT\x00"
VERSION = 1


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays atomically (temp file then rename)."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            # asarray keeps 0-d shapes; ascontiguousarray would promote to 1-d
            data = np.asarray(arr, dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes(order="C"))
    os.replace(tmp, path)


def load_arrays(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name-to-array mapping."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise ValueError(f"{path}: truncated record for '{name}'")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
