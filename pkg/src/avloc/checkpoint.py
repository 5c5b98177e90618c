"""Named-tensor checkpoint container.

Layout (little-endian)::

    magic    8 bytes b"CACECKPT"
    version  u16
    meta     u32 length + UTF-8 text (the run config)
    count    u32
    entries  count x (u32 name length, name bytes, u32 ndim, ndim x u32 dims, float64 payload)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataio import BadMagicError, FeatureFormatError, TruncatedFileError, VersionMismatchError

__all__ = ["CKPT_MAGIC", "CKPT_VERSION", "encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = b"CACECKPT"
CKPT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: str = "") -> bytes:
    meta_b = meta.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(meta_b)), meta_b]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.off, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"{self.source}: checkpoint truncated at byte {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], str]:
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (bad magic)")
    r = _Reader(buf, source)
    r.take(len(CKPT_MAGIC))
    (version,) = struct.unpack("<H", r.take(2))
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{source}: unsupported checkpoint version {version}")
    meta = r.take(r.u32()).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.off != len(buf):
        raise FeatureFormatError(f"{source}: {len(buf) - r.off} trailing bytes in checkpoint")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: str = "") -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
