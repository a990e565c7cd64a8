"""GSW1 weight container.

Layout (all integers little-endian)::

    b"GSW1"
    repeated record:
        u16 name length, name (utf-8)
        u8  dtype tag   (0 = float32, 1 = int8)
        u8  rank
        u32 dim * rank
        payload, row-major little-endian

Quantized tensors (the GSW1-Q flavour) are stored as int8 records, each
immediately followed by a rank-0 float32 record named ``<name>@scale``.
The byte length of this encoding is the model-size metric.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSW1"
SCALE_SUFFIX = "@scale"
_TAGS = {np.dtype("float32"): 0, np.dtype("int8"): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        arr = arr.astype(np.float32)
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def dumps(tensors: dict[str, np.ndarray], scales: dict[str, float] | None = None) -> bytes:
    """Encode named tensors; names present in ``scales`` get a scale record."""
    scales = scales or {}
    parts = [MAGIC]
    for name, arr in tensors.items():
        parts.append(_record(name, arr))
        if name in scales:
            parts.append(_record(name + SCALE_SUFFIX, np.asarray(scales[name], dtype=np.float32)))
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    if blob[:4] != MAGIC:
        raise ValueError("not a GSW1 blob (bad magic)")
    tensors: dict[str, np.ndarray] = {}
    scales: dict[str, float] = {}
    pos = 4
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dtype = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=pos).astype(dtype)
        pos += nbytes
        arr = arr.reshape(dims)
        if name.endswith(SCALE_SUFFIX):
            scales[name[: -len(SCALE_SUFFIX)]] = float(arr)
        else:
            tensors[name] = arr
    return tensors, scales


def save(path: str | Path, tensors: dict[str, np.ndarray], scales: dict[str, float] | None = None) -> int:
    blob = dumps(tensors, scales)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path: str | Path):
    return loads(Path(path).read_bytes())
