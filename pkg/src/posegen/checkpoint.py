"""The "PGCK" tensor container.

Layout (little-endian)::

    b"PGCK"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u32 extent, f32 data }

Free-form metadata rides along as one extra record named ``__meta__``: a rank-1
float32 tensor holding the utf-8 bytes of a ``key=value`` text block.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .io import format_kv, parse_kv

MAGIC = b"PGCK"
VERSION = 1
META_NAME = "__meta__"


class CheckpointFormatError(ValueError):
    pass


def encode_tensors(named: dict[str, Tensor], meta: dict | None = None) -> bytes:
    records = dict(named)
    if meta:
        text = format_kv({k: meta[k] for k in sorted(meta)}).encode("utf-8")
        records[META_NAME] = torch.tensor(list(text), dtype=torch.float32)
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name in sorted(records):
        t = records[name].detach().to(torch.float32).contiguous()
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack("<I", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        out.append(t.numpy().astype("<f4", copy=False).tobytes())
    return b"".join(out)


def decode_tensors(raw: bytes) -> tuple[dict[str, Tensor], dict[str, str]]:
    if raw[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not a PGCK container")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported PGCK version {version}")
    pos = 12
    named: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            numel = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=numel, offset=pos).copy()
            pos += 4 * numel
            named[name] = torch.from_numpy(data.astype(np.float32)).reshape(shape)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated PGCK container: {exc}") from None
    meta = {}
    if META_NAME in named:
        meta = parse_kv(bytes(int(b) for b in named.pop(META_NAME).tolist()).decode("utf-8"))
    return named, meta


def save_tensors(path: str | Path, named: dict[str, Tensor], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_tensors(named, meta))


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict[str, str]]:
    return decode_tensors(Path(path).read_bytes())
