"""Binary named-tensor checkpoints.

Layout (little-endian)::

    b"MTKD" | u32 version | payload | u64 checksum

    payload = u32 count, then per tensor:
        u32 name_len | name (UTF-8) | u32 rank | u32 extents[rank] | f32 data (row-major)

The checksum is BLAKE2b with an 8-byte digest over ``payload``.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import IntegrityError

MAGIC = b"MTKD"
VERSION = 1


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write ``tensors`` (arrays or Tensors) as float32."""
    payload = encode_tensors(tensors)
    blob = MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<Q", payload_checksum(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > self.end:
            raise IntegrityError(field, "file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint, verifying magic, version and checksum."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise IntegrityError("magic", f"expected {MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < 8:
        raise IntegrityError("version", "file truncated")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise IntegrityError("version", f"unsupported version {version}")
    if len(buf) < 8 + 4 + 8:
        raise IntegrityError("payload", "file truncated")
    payload_end = len(buf) - 8
    stored = struct.unpack("<Q", buf[payload_end:])[0]
    r = _Reader(buf, 8, payload_end)
    count = r.u32("count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"tensor[{i}].name_len")
        try:
            name = r.take(name_len, f"tensor[{i}].name").decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityError(f"tensor[{i}].name", "invalid UTF-8") from None
        rank = r.u32(f"{name}.rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name}.extents"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"{name}.data"), dtype="<f4").astype(np.float32).reshape(shape)
        out[name] = data
    if r.pos != payload_end:
        raise IntegrityError("payload", f"{payload_end - r.pos} unexpected trailing bytes")
    if payload_checksum(buf[8:payload_end]) != stored:
        raise IntegrityError("checksum", "payload checksum mismatch")
    return out
