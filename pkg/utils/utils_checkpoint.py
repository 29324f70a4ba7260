"""
utils_checkpoint.py - length-prefixed binary checkpoint container.

Layout (little-endian):
    b"DNICKPT\\0"                 8-byte magic
    u32 version
    u64 meta length, meta JSON (utf-8)
    repeated until EOF:
        u32 name length, name (utf-8)
        u64 payload length, payload (.npy bytes, no pickle)
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import io
import json
import os
import pathlib
import struct
from dataclasses import dataclass
from typing import Any

# Import external packages
import numpy as np
import pandas as pd

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

MAGIC = b"DNICKPT\0"
VERSION = 1

#####################################
# Errors and Types
#####################################


class CheckpointFormatError(ValueError):
    """Raised for bad magic, unknown versions or truncated checkpoints."""


def raise_checkpoint_error(msg: str) -> None:
    logger.error(msg)
    raise CheckpointFormatError(msg)


@dataclass
class Checkpoint:
    meta: dict[str, Any]
    arrays: dict[str, np.ndarray]
    version: int = VERSION


#####################################
# Writing
#####################################


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def save_checkpoint(path: pathlib.Path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> pathlib.Path:
    """Write atomically (temp file, then rename)."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for name in sorted(arrays):
            name_bytes = name.encode("utf-8")
            payload = _npy_bytes(arrays[name])
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
    os.replace(tmp, path)
    logger.info(f"Checkpoint written: {path} ({len(arrays)} arrays)")
    return path


#####################################
# Reading
#####################################


def _take(raw: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(raw):
        raise_checkpoint_error(f"checkpoint truncated while reading {what}")
    return raw[offset : offset + size], offset + size


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    raw = pathlib.Path(path).read_bytes()
    magic, offset = _take(raw, 0, len(MAGIC), "magic")
    if magic != MAGIC:
        raise_checkpoint_error(f"{path}: not a checkpoint (magic {magic!r})")
    chunk, offset = _take(raw, offset, 4, "version")
    (version,) = struct.unpack("<I", chunk)
    if version != VERSION:
        raise_checkpoint_error(f"{path}: unsupported checkpoint version {version}")
    chunk, offset = _take(raw, offset, 8, "meta length")
    (meta_len,) = struct.unpack("<Q", chunk)
    chunk, offset = _take(raw, offset, meta_len, "meta")
    try:
        meta = json.loads(chunk.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise_checkpoint_error(f"{path}: unreadable meta block ({e})")

    arrays: dict[str, np.ndarray] = {}
    while offset < len(raw):
        chunk, offset = _take(raw, offset, 4, "name length")
        (name_len,) = struct.unpack("<I", chunk)
        chunk, offset = _take(raw, offset, name_len, "name")
        name = chunk.decode("utf-8")
        chunk, offset = _take(raw, offset, 8, f"{name} length")
        (payload_len,) = struct.unpack("<Q", chunk)
        chunk, offset = _take(raw, offset, payload_len, name)
        try:
            arrays[name] = np.load(io.BytesIO(chunk), allow_pickle=False)
        except ValueError as e:
            raise_checkpoint_error(f"{path}: array {name} is corrupt ({e})")
    return Checkpoint(meta=meta, arrays=arrays, version=version)


def inspect_checkpoint(path: pathlib.Path) -> tuple[dict[str, Any], pd.DataFrame]:
    """Meta block and one table row per array (shape, dtype, size, L2 norm)."""
    ckpt = load_checkpoint(path)
    rows = [
        {
            "name": name,
            "shape": "x".join(str(d) for d in array.shape) or "scalar",
            "dtype": str(array.dtype),
            "size": int(array.size),
            "l2_norm": float(np.linalg.norm(array.astype(np.float64))) if array.size else 0.0,
        }
        for name, array in sorted(ckpt.arrays.items())
    ]
    table = pd.DataFrame(rows, columns=["name", "shape", "dtype", "size", "l2_norm"])
    return ckpt.meta, table
