"""PRT1 tensor container.

Layout: the 4-byte magic ``PRT1``, a little-endian uint32 header length, a
UTF-8 JSON header ``{"dims": [...], "dtype": "f32", "meta": {...}}`` and a
row-major little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PRT1"


class PrtError(ValueError):
    pass


def dumps(array: np.ndarray, meta: dict[str, Any] | None = None) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps(
        {"dims": list(array.shape), "dtype": "f32", "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + array.tobytes()


def loads(data: bytes) -> tuple[np.ndarray, dict[str, Any]]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise PrtError("not a PRT1 container (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if 8 + hlen > len(data):
        raise PrtError("truncated PRT1 header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PrtError(f"invalid PRT1 header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise PrtError(f"unsupported dtype {header.get('dtype')!r}")
    dims = [int(d) for d in header["dims"]]
    count = int(np.prod(dims)) if dims else 1
    payload = data[8 + hlen :]
    if len(payload) != 4 * count:
        raise PrtError(f"payload has {len(payload)} bytes, expected {4 * count} for dims {dims}")
    array = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return array, header.get("meta", {})


def save(path: str | Path, array: np.ndarray, meta: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(array, meta))


def load(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    return loads(Path(path).read_bytes())
