"""Binary tensor container format.

Layout: 8-byte magic ``BNTENSR1``, one u8 dtype tag (0 = float32,
1 = float64, 2 = int32), one u8 rank, ``rank`` little-endian u64 extents,
then the row-major payload. Used for datasets, predictions, latent stacks
and token maps.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"BNTENSR1"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


class ContainerError(IOError):
    pass


def write_tensor(path, array):
    array = np.asarray(array)
    if array.ndim:  # ascontiguousarray would promote 0-d arrays to 1-d
        array = np.ascontiguousarray(array)
    if array.dtype not in _TAG_FOR:
        raise ContainerError(f"unsupported dtype {array.dtype}")
    tag = _TAG_FOR[array.dtype]
    header = MAGIC + struct.pack("<BB", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    atomic_write(path, header + array.astype(_DTYPE_TAGS[tag]).tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    return tensor_from_bytes(blob)


def tensor_from_bytes(blob):
    if len(blob) < 10 or blob[:8] != MAGIC:
        raise ContainerError("bad magic: not a tensor container")
    tag, rank = struct.unpack_from("<BB", blob, 8)
    if tag not in _DTYPE_TAGS:
        raise ContainerError(f"unknown dtype tag {tag}")
    offset = 10
    if len(blob) < offset + 8 * rank:
        raise ContainerError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    dtype = _DTYPE_TAGS[tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ContainerError(
            f"payload length {len(payload)} != expected {expected} for shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def tensor_to_bytes(array):
    array = np.asarray(array)
    if array.ndim:
        array = np.ascontiguousarray(array)
    tag = _TAG_FOR[array.dtype]
    header = MAGIC + struct.pack("<BB", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def atomic_write(path, data: bytes):
    """Write-temp-then-rename so readers never observe partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
