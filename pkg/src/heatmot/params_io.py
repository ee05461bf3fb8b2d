"""Flat binary container for named float64 arrays.

Layout (all little-endian)::

    magic      4 bytes   b"HMPB"
    version    uint32    1
    count      uint32    number of entries
    per entry:
      name_len uint16
      name     name_len bytes, UTF-8
      ndim     uint32
      shape    ndim x uint32
      data     prod(shape) x float64, row-major

Scalars are stored with ``ndim = 0`` and one value.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"HMPB"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_arrays(arrays: Mapping[str, np.ndarray], stream: BinaryIO) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<H", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ContainerError("truncated parameter container")
    return data


def read_arrays(stream: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(stream, 4) != MAGIC:
        raise ContainerError("not a parameter container (bad magic)")
    version, count = struct.unpack("<II", _read_exact(stream, 8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(stream, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(stream, 8 * size), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def save_params(arrays: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_arrays(arrays, fh)


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_arrays(fh)
