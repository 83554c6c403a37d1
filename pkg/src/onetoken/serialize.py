"""Named-tensor archives.

Binary layout, one record per tensor, records concatenated in name order::

    b"OTNS"            4 magic bytes
    rank               uint64 little-endian
    dims[rank]         uint64 little-endian each
    payload            float64 little-endian, row-major

Names (and any extra metadata) live in a JSON sidecar next to the binary
file: ``<path>`` holds the records, ``<path>.json`` the sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"OTNS"


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<Q", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad magic at byte {offset}")
    offset += 4
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
    return data.astype(np.float64), offset + 8 * count


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(tensors)
    with open(path, "wb") as fh:
        for name in names:
            fh.write(encode_tensor(np.asarray(tensors[name])))
    side = {"names": names, "meta": dict(meta or {})}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    side = json.loads(sidecar_path(path).read_text())
    buf = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name in side["names"]:
        out[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise ValueError(f"{path}: {len(buf) - offset} trailing bytes after {len(out)} tensors")
    return out, side.get("meta", {})
