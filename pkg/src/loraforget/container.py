"""Binary tensor container shared by network and adapter checkpoints.

Layout: the 6-byte magic ``ERNET1`` followed by records until EOF. Each
record is ``u32 name_len | name bytes | u8 tag | u32 rank | u32 extents... |
float32 payload``, all little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

MAGIC = b"ERNET1"

TAG_CODES = {"encoder": 0, "decoder": 1, "head": 2, "trunk": 3, "adapter": 4, "header": 255}
TAG_NAMES = {v: k for k, v in TAG_CODES.items()}


class ContainerError(ValueError):
    """Malformed or truncated checkpoint file."""


class Record(NamedTuple):
    name: str
    tag: str
    array: np.ndarray


def encode(records: Iterable[Record]) -> bytes:
    parts = [MAGIC]
    for rec in records:
        name = rec.name.encode("utf-8")
        arr = np.asarray(rec.array, dtype="<f4")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BI", TAG_CODES[rec.tag], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> list[Record]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic: not an ERNET1 container")
    pos = len(MAGIC)
    records = []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"truncated container at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag_code, rank = struct.unpack("<BI", take(5))
        if tag_code not in TAG_NAMES:
            raise ContainerError(f"{name}: unknown tag byte {tag_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        records.append(Record(name, TAG_NAMES[tag_code], arr))
    return records


def write(path, records: Iterable[Record]) -> None:
    Path(path).write_bytes(encode(records))


def read(path) -> list[Record]:
    return decode(Path(path).read_bytes())
