"""
Binary persistence for tensors.

RBT1 (one tensor): b"RBT1", u32 rank, rank x u64 dims, little-endian f64 values.
RBA1 (named archive): b"RBA1", u32 count, then per entry a u32 name length, the UTF-8
name and an RBT1 blob, then a u64 length and a trailing JSON manifest.
"""
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import DataIOError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"RBT1"
ARCHIVE_MAGIC = b"RBA1"

PathLike = Union[str, os.PathLike]


def encode_tensor(values: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Decode one RBT1 tensor starting at ``offset``.

    Returns:
        (array, offset just past the tensor)
    """
    if blob[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("missing RBT1 magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    end = offset + 8 * count
    if end > len(blob):
        raise ValueError("truncated RBT1 payload")
    arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(dims)
    return arr, end


def write_tensor(path: PathLike, values: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_tensor(values))
    except OSError as e:
        raise DataIOError(f"could not write tensor: {e}", str(path)) from e


def read_tensor(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"could not read tensor: {e}", str(path)) from e
    try:
        arr, end = decode_tensor(blob)
    except (ValueError, struct.error) as e:
        raise DataIOError(f"invalid RBT1 file: {e}", str(path)) from e
    if end != len(blob):
        raise DataIOError("trailing bytes after RBT1 tensor", str(path))
    return arr


def save_archive(path: PathLike, tensors: Dict[str, np.ndarray], manifest: Dict[str, Any]) -> None:
    """
    Write a named-tensor archive; names are stored in sorted order so that
    identical contents always produce identical bytes.
    """
    chunks = [ARCHIVE_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(encode_tensor(tensors[name]))
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(meta)))
    chunks.append(meta)
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as e:
        raise DataIOError(f"could not write archive: {e}", str(path)) from e
    logger.debug(f"Archive written: {path} ({len(tensors)} tensors)")


def load_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"could not read archive: {e}", str(path)) from e
    try:
        if blob[:4] != ARCHIVE_MAGIC:
            raise ValueError("missing RBA1 magic")
        (count,) = struct.unpack_from("<I", blob, 4)
        offset = 8
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tensors[name], offset = decode_tensor(blob, offset)
        (meta_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        manifest = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    except (ValueError, struct.error, UnicodeDecodeError) as e:
        raise DataIOError(f"invalid RBA1 archive: {e}", str(path)) from e
    return tensors, manifest
