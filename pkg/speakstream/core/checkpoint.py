"""Versioned binary checkpoint of a model.

Layout (little-endian)::

    b"SSCK" | u16 version | u32 n | n bytes of JSON metadata
    u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u32 dims... | float32 values (row-major)
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Final, Optional, Union

import numpy as np

from .errors import ChecksumError, FormatError
from .model import ModelConfig, Params

MAGIC: Final[bytes] = b"SSCK"
VERSION: Final[int] = 1


@dataclass
class Checkpoint:
    params: Params
    metadata: Dict[str, Any] = field(default_factory=dict)


def to_bytes(params: Params, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    meta = {"model": asdict(params.config), **(metadata or {})}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < len(MAGIC) + 10 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not a speakstream checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")

    view = memoryview(body)
    offset = len(MAGIC)

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise FormatError(f"{source}: truncated at byte {offset}")
        out = struct.unpack_from(fmt, view, offset)
        offset += size
        return out

    version, meta_len = read("<HI")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    meta = json.loads(bytes(view[offset : offset + meta_len]).decode("utf-8"))
    offset += meta_len
    (count,) = read("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + size > len(view):
            raise FormatError(f"{source}: tensor {name} is truncated")
        tensors[name] = np.frombuffer(view[offset : offset + size], dtype="<f4").reshape(shape).copy()
        offset += size
    if offset != len(view):
        raise FormatError(f"{source}: {len(view) - offset} trailing bytes")

    model_meta = meta.pop("model", None)
    if not isinstance(model_meta, dict):
        raise FormatError(f"{source}: metadata lacks the model configuration")
    try:
        config = ModelConfig(**model_meta)
    except TypeError as exc:
        raise FormatError(f"{source}: bad model configuration: {exc}") from exc
    params = Params(config, {k: v.astype(config.np_dtype) for k, v in tensors.items()}).validate()
    return Checkpoint(params=params, metadata=meta)


def save(path: Union[str, Path], params: Params, metadata: Optional[Dict[str, Any]] = None) -> None:
    Path(path).write_bytes(to_bytes(params, metadata))


def load(path: Union[str, Path]) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), source=str(path))
