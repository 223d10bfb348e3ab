"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"FRACNET1"                      magic, format version 1
    32 bytes                         SHA-256 of the topology text dump
    2 bytes                          element type, b"f4" or b"f8"
    u32                              tensor count
    per tensor:
        u32 name length, utf-8 name
        u32 ndim, ndim x u32 extents
        raw little-endian elements

Tensor names are ``param/<name>``, ``buffer/<name>`` and ``velocity/<name>``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..topology import FractalTopology
from .params import ParameterStore

MAGIC = b"FRACNET1"
_CODES = {np.dtype(np.float32): b"f4", np.dtype(np.float64): b"f8"}
_SECTIONS = ("param", "buffer", "velocity")


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def save_checkpoint(path: str | os.PathLike, net: FractalTopology, store: ParameterStore) -> None:
    dtype = store.dtype
    if dtype not in _CODES:
        raise CheckpointError(f"unsupported element type {dtype}")
    groups = zip(_SECTIONS, (store.params, store.buffers, store.velocity))
    tensors = [(f"{sec}/{k}", v) for sec, d in groups for k, v in d.items()]
    chunks = [MAGIC, net.fingerprint, _CODES[dtype], struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[bytes, ParameterStore]:
    """Parse a checkpoint without topology verification; returns (fingerprint, store)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a FRACNET1 checkpoint")
    try:
        fp = data[8:40]
        code = data[40:42]
        dtype = next(d for d, c in _CODES.items() if c == code)
        (count,) = struct.unpack_from("<I", data, 42)
        off = 46
        sections: dict[str, dict[str, np.ndarray]] = {s: {} for s in _SECTIONS}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + nlen].decode()
            off += 4 + nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize,
                                offset=off).astype(dtype).reshape(shape)
            off += nbytes
            sec, key = name.split("/", 1)
            sections[sec][key] = arr
    except (struct.error, StopIteration, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return fp, ParameterStore(sections["param"], sections["buffer"], sections["velocity"])


def load_checkpoint(path: str | os.PathLike, net: FractalTopology) -> ParameterStore:
    fp, store = read_checkpoint(path)
    if fp != net.fingerprint:
        raise FingerprintMismatch(f"{path}: checkpoint was written for a different topology")
    return store
