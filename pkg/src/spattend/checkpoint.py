"""Checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes  b"SPATCKPT"
    version      uint32   (currently 1)
    config hash  32 bytes (sha256 of the canonical config text)
    count        uint32   number of arrays
    per array:
      name length uint16, name (utf-8)
      ndim        uint8,  dims uint64 * ndim
      values      float64 little-endian, row-major
"""

import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SPATCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(arrays, config_hash):
    digest = bytes.fromhex(config_hash) if isinstance(config_hash, str) else bytes(config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save(path, arrays, config_hash):
    data = to_bytes(arrays, config_hash)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def from_bytes(data):
    """Return ``(arrays, config_hash_hex, version)``."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = data[12:44]
    (count,) = struct.unpack_from("<I", data, 44)
    pos = 48
    arrays = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return arrays, digest.hex(), version


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
