"""DBFT binary tensor files and named-tensor containers (checkpoints, feature sets).

Tensor blob: ``b"DBFT"``, version byte 0x01, u8 rank, rank x u64 LE extents,
then the row-major f32 LE payload.

Named container: ``b"DBFC"``, version byte 0x01, u64 LE header length, a UTF-8
JSON header ``{"tensors": [{"name", "shape"}...], ...}``, then one DBFT blob
per entry in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

MAGIC = b"DBFT"
CONTAINER_MAGIC = b"DBFC"
VERSION = 1


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob at ``offset``; returns the f64 array and the end offset."""
    if buf[offset: offset + 4] != MAGIC:
        raise IngestionError("bad magic, not a DBFT tensor")
    if len(buf) < offset + 6:
        raise IngestionError("truncated DBFT header")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise IngestionError(f"unsupported DBFT version {version}")
    pos = offset + 6
    if len(buf) < pos + 8 * rank:
        raise IngestionError("truncated DBFT header")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise IngestionError(f"truncated DBFT payload: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
    return arr.reshape(shape), end


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise IngestionError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def save_container(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = dict(meta or {})
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CONTAINER_MAGIC, struct.pack("<BQ", VERSION, len(hbytes)), hbytes]
    parts += [encode_tensor(v) for v in tensors.values()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def read_container_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(13)
        if head[:4] != CONTAINER_MAGIC or len(head) < 13:
            raise IngestionError(f"{path}: not a DBFC container")
        (n,) = struct.unpack("<Q", head[5:13])
        return json.loads(fh.read(n))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != CONTAINER_MAGIC or len(buf) < 13:
        raise IngestionError(f"{path}: not a DBFC container")
    version, n = struct.unpack_from("<BQ", buf, 4)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported container version {version}")
    header = json.loads(buf[13: 13 + n])
    pos = 13 + n
    out = {}
    for entry in header["tensors"]:
        arr, pos = decode_tensor(buf, pos)
        if list(arr.shape) != entry["shape"]:
            raise IngestionError(f"{path}: tensor {entry['name']} shape mismatch")
        out[entry["name"]] = arr
    return out, header
