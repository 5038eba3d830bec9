"""Versioned binary checkpoints: JSON metadata plus a name -> float64 tensor map.

Layout (little-endian)::

    b"LCKP" | u16 version | u32 meta_len | meta JSON (UTF-8, sorted keys)
    | u32 count | per tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], f64 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]

    def encode(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
                 struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()

    def save(self, path) -> str:
        data = self.encode()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def decode(cls, buf: bytes) -> Checkpoint:
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        try:
            version, meta_len = struct.unpack_from("<HI", buf, 4)
            if version != VERSION:
                raise CheckpointError(f"checkpoint version {version} unsupported")
            pos = 10
            meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
            pos += meta_len
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                name = buf[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (ndim,) = struct.unpack_from("<B", buf, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                size = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
                tensors[name] = arr.astype(np.float64)
                pos += 8 * size
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        if pos != len(buf):
            raise CheckpointError("trailing bytes after checkpoint tensors")
        return cls(meta, tensors)

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.decode(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
