"""Little-endian binary containers for arrays.

Single tensor (``.avt``)::

    b"AVTN" | u16 version | u8 dtype code | u8 ndim | u32[ndim] shape | payload

Bundle (``.avb``, used for checkpoints and caches)::

    b"AVBN" | u16 version | u32 header length | UTF-8 JSON header | payload

The JSON header holds ``meta`` (free-form) and ``tensors``, a list of
``{name, dtype, shape, offset, nbytes}`` records pointing into the payload.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_TENSOR_MAGIC = b"AVTN"
_BUNDLE_MAGIC = b"AVBN"

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8", 4: "<u1", 5: "<c8", 6: "<c16", 7: "<u4"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _le(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = _le(array)
    code = _CODES.get(array.dtype.str)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}")
    head = _TENSOR_MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != _TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, code, ndim = struct.unpack_from("<HBB", data, 4)
    if version != VERSION or code not in _DTYPES:
        raise FormatError(f"unsupported tensor header (version {version}, dtype code {code})")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    dtype = np.dtype(_DTYPES[code])
    count = int(np.prod(shape, dtype=np.int64))
    offset = 8 + 4 * ndim
    if len(data) != offset + count * dtype.itemsize:
        raise FormatError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_tensor(path, array: np.ndarray) -> None:
    _atomic_write(path, tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def bundle_to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    records, chunks, offset = [], [], 0
    for name, array in tensors.items():
        array = _le(np.asarray(array))
        if array.dtype.str not in _CODES:
            raise FormatError(f"unsupported dtype {array.dtype} for {name!r}")
        raw = array.tobytes()
        records.append({"name": name, "dtype": array.dtype.str, "shape": list(array.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": records}, sort_keys=True).encode()
    return _BUNDLE_MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)


def bundle_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != _BUNDLE_MAGIC:
        raise FormatError("bad bundle magic")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    start = 10 + hlen
    try:
        header = json.loads(data[10:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt bundle header: {exc}") from exc
    tensors = {}
    for rec in header["tensors"]:
        lo = start + rec["offset"]
        if lo + rec["nbytes"] > len(data):
            raise FormatError(f"truncated payload for {rec['name']!r}")
        arr = np.frombuffer(data, dtype=np.dtype(rec["dtype"]), count=rec["nbytes"] // np.dtype(rec["dtype"]).itemsize,
                            offset=lo)
        tensors[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return tensors, header["meta"]


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    _atomic_write(path, bundle_to_bytes(tensors, meta))


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    return bundle_from_bytes(Path(path).read_bytes())
