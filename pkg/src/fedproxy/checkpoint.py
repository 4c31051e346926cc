"""Binary checkpoint envelope for flat parameter vectors.

Layout of a file (all integers little-endian)::

    b"FPXY"                 magic
    u32                     format version
    u32                     segment count
    per segment:
        u32 + utf-8 bytes   name
        u64                 offset
        u64                 length
    f64 * total_dim         values
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .params import FlatParams, ParamLayout, Segment

MAGIC = b"FPXY"
FORMAT_VERSION = 1


class CheckpointFormatError(Exception):
    """The file is not a valid checkpoint (bad magic, truncated, inconsistent table)."""


class UnsupportedVersionError(CheckpointFormatError):
    pass


def encode(params: FlatParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.layout.segments))]
    for seg in params.layout.segments:
        name = seg.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<QQ", seg.offset, seg.length))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> FlatParams:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not an FPXY checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (count,) = struct.unpack("<I", take(4))
    segments = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("segment name is not valid utf-8") from exc
        offset, length = struct.unpack("<QQ", take(16))
        segments.append(Segment(name, offset, length))
    try:
        layout = ParamLayout(tuple(segments))
    except ValueError as exc:
        raise CheckpointFormatError(f"inconsistent segment table: {exc}") from exc
    n = layout.total_dim
    raw = take(8 * n)
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after values")
    values = np.frombuffer(bytes(raw), dtype="<f8").astype(np.float64)
    try:
        return FlatParams(values, layout)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc


def save_checkpoint(params: FlatParams, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode(params))
    return path


def load_checkpoint(path: str | os.PathLike) -> FlatParams:
    return decode(Path(path).read_bytes())
