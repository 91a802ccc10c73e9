"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CRNK"  u32 version  u32 entry_count
    entry_count x { u16 name_len, name (UTF-8), u8 dtype, u8 rank, rank x u32 dim, f32 payload }
    u32 alias_count
    alias_count x { u16 len, alias name, u16 len, canonical name }

dtype code 0 is float32, the only payload type.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .arch import ParamStore

MAGIC = b"CRNK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def _write_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:40]}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_name(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def dumps(entries: dict, aliases: dict | None = None) -> bytes:
    """Serialize ``{name: array}`` plus an alias table to bytes."""
    aliases = aliases or {}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"rank too large for {name}")
        _write_name(buf, name)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(aliases)))
    for alias, canonical in aliases.items():
        _write_name(buf, alias)
        _write_name(buf, canonical)
    return buf.getvalue()


def loads(data: bytes):
    """Inverse of ``dumps``: returns ``(entries, aliases)`` with float32 arrays."""
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("bad magic; not a CRNK checkpoint")
    version, count = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        name = _read_name(buf)
        dtype, rank = struct.unpack("<BB", _read_exact(buf, 2))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name}")
        shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        payload = _read_exact(buf, 4 * size)
        entries[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    (n_alias,) = struct.unpack("<I", _read_exact(buf, 4))
    aliases = {}
    for _ in range(n_alias):
        alias = _read_name(buf)
        aliases[alias] = _read_name(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after alias table")
    return entries, aliases


def save(store: ParamStore, path) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(store.entries, store.aliases))
    os.replace(tmp, path)


def load(path) -> ParamStore:
    entries, aliases = loads(Path(path).read_bytes())
    store = ParamStore()
    for name, arr in entries.items():
        store.add(name, arr)
    for alias, canonical in aliases.items():
        store.alias(alias, canonical)
    return store


def save_entries(entries: dict, path) -> None:
    """Write bare named tensors (no aliases), e.g. optimizer state."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(entries))
    os.replace(tmp, path)


def load_entries(path) -> dict:
    return loads(Path(path).read_bytes())[0]
