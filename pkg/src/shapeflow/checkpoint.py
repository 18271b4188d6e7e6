"""Binary checkpoint files: named arrays with explicit little-endian layout.

Layout (all integers little-endian):
    magic  b"SFCK"
    u8     format version (currently 1)
    u32    entry count
    per entry:
        u16  name length, then UTF-8 name bytes
        u8   dtype code (0 = float64, 1 = float32)
        u8   rank, then rank * u32 extents
        raw  little-endian array bytes, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFCK"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODE_FOR_KIND:
                arr = arr.astype(np.float64)
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", _CODE_FOR_KIND[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<BI", f.read(5))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            dtype = _DTYPE_CODES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape \
                else dtype.itemsize
            data = np.frombuffer(f.read(n_bytes), dtype=dtype).reshape(shape)
            out[name] = data.astype(dtype.newbyteorder("="))
        return out
