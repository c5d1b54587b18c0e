"""Minimal dense float32 tensor container used by the CLI.

Layout: ``b"ANYT" | u32 ndim | ndim x u32 dims | float32 LE payload``.
Files ending in ``.npy`` are read and written with numpy instead.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .core import AnyqError
from .pack import atomic_write

MAGIC = b"ANYT"


class TensorFormatError(AnyqError, ValueError):
    pass


def tensor_to_bytes(a) -> bytes:
    a = np.asarray(a, dtype="<f4")
    return MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise TensorFormatError("not a dense tensor file (bad magic or too short)")
    (ndim,) = struct.unpack_from("<I", data, 4)
    if ndim > 8:
        raise TensorFormatError(f"implausible rank {ndim}")
    if len(data) < 8 + 4 * ndim:
        raise TensorFormatError("file ends inside the shape")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    start = 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != start + 4 * count:
        raise TensorFormatError(f"payload is {len(data) - start} bytes, shape {dims} needs {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=start, count=count).astype(np.float32).reshape(dims)


def read_tensor(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if path.endswith(".npy"):
        try:
            return np.load(io.BytesIO(data), allow_pickle=False).astype(np.float32)
        except ValueError as exc:
            raise TensorFormatError(f"cannot read {path}: {exc}") from exc
    return tensor_from_bytes(data)


def write_tensor(a, path):
    path = os.fspath(path)
    if path.endswith(".npy"):
        buf = io.BytesIO()
        np.save(buf, np.asarray(a, dtype=np.float32), allow_pickle=False)
        atomic_write(path, buf.getvalue())
    else:
        atomic_write(path, tensor_to_bytes(a))
