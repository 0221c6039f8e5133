"""Binary checkpoint container.

All integers are little-endian.  Layout::

    offset  bytes   field
    0       8       magic  b"MOACKPT\\0"
    8       4       uint32 format version (currently 1)
    12      4       uint32 header length L
    16      L       UTF-8 JSON: {"model": <ModelConfig dict>, "meta": {...}}
    16+L    4       uint32 tensor count
    then, per tensor, in model parameter order:
            2       uint16 name length n
            n       UTF-8 parameter name
            1       uint8 rank r
            4*r     uint32 extents
            4*prod  float32 values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import FormatError, TruncatedFileError
from .model import ModelConfig, MoaTransformer

MAGIC = b"MOACKPT\x00"
VERSION = 1


def save_checkpoint(path, model: MoaTransformer, meta: Optional[dict] = None) -> None:
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: truncated at byte offset {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Tuple[ModelConfig, Dict[str, np.ndarray], dict]:
    """Return ``(config, {name: float32 array}, meta)``."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(8) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode())
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    (count,) = r.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return config, arrays, header.get("meta", {})


def load_checkpoint(path, dtype=np.float32) -> Tuple[MoaTransformer, dict]:
    config, arrays, meta = read_checkpoint(path)
    model = MoaTransformer(config, seed=0, dtype=dtype)
    model.load_state_dict(arrays)
    return model, meta
