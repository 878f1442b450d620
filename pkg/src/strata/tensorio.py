"""Binary container for named float tensors.

Layout: magic "STRD", u32 version (currently 1), u32 tensor count; then per
tensor a u32 name length, the UTF-8 name, u32 ndim, u64 dims, and a float32
little-endian row-major payload. Values are narrowed to float32 on write and
widened back to float64 on read.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"STRD"
VERSION = 1


class FormatError(ValueError):
    """Raised when a container file is malformed."""


def save_tensors(tensors: dict[str, Tensor], path: str | Path):
    """Write named tensors to path; iteration order is preserved."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    """Read named tensors from path, as float64, in file order."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, Tensor] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        numel = 1
        for s in shape:
            numel *= s
        payload = take(4 * numel)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
