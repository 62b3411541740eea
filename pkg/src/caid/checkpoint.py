"""Bit-exact binary checkpoint container.

Layout (all integers little-endian)::

    b"CAID" | version u32 | config hash (32 bytes) | tensor count u32
    | per tensor: name length u16, UTF-8 name, dtype u8 (0 = f32), ndim u8,
                  dims u32 * ndim, payload f32
    | CRC32 u32

The CRC covers every byte before it, so no single corrupted byte can load
silently.  The table is walked before the CRC is checked so that a short
file reports truncation rather than a checksum failure.  Epoch and
validation loss travel as the 1-element tensors ``meta.epoch`` and
``meta.val_loss``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CAID"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = -1
    val_loss: float = float("nan")
    config_hash: bytes = field(default=b"\0" * 32)


def config_hash(config: dict) -> bytes:
    """SHA-256 of the canonical JSON form of a config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).digest()


def dumps(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    table = OrderedDict(ckpt.tensors)
    table["meta.epoch"] = np.array([ckpt.epoch], np.float32)
    table["meta.val_loss"] = np.array([ckpt.val_loss], np.float32)
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.config_hash, struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a CAID checkpoint")
    if len(blob) < 8:
        raise TruncatedError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < 44 + 4:
        raise TruncatedError("truncated checkpoint header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    digest = body[8:40]
    (count,) = struct.unpack_from("<I", body, 40)
    pos = 44
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != 0:
                raise CheckpointError(f"unsupported dtype code {dtype} for {name}")
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise TruncatedError(f"payload of {name} runs past end of file")
            tensors[name] = np.frombuffer(body, "<f4", nbytes // 4, pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise TruncatedError(f"truncated tensor table: {exc}") from None
    except UnicodeDecodeError:
        raise CheckpointError("tensor name is not valid UTF-8") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    epoch = int(tensors.pop("meta.epoch")[0]) if "meta.epoch" in tensors else -1
    val = float(tensors.pop("meta.val_loss")[0]) if "meta.val_loss" in tensors else float("nan")
    return Checkpoint(tensors, epoch, val, bytes(digest))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
