"""Binary checkpoint format.

Layout (little-endian)::

    b"PASN" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_arrays, then per array:
        u16 name_len | name | u8 dtype_len | dtype str (e.g. "<f4") | u8 ndim | u32 dims[ndim]
        u64 nbytes | raw C-order bytes
    u32 CRC-32 of every preceding byte

Arrays are written in sorted name order so that equal states give equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PASN"
VERSION = 1
# on-disk array-name prefix -> Checkpoint field
GROUPS = {"param": "params", "buffer": "buffers", "adam_m": "adam_m", "adam_v": "adam_v"}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int  # number of completed epochs
    step: int  # number of completed optimiser steps
    rng_state: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, attr in GROUPS.items():
            for name, arr in getattr(self, attr).items():
                out[f"{group}/{name}"] = arr
        return out

    def header(self) -> dict:
        return {"config": self.config, "epoch": self.epoch, "step": self.step, "rng_state": self.rng_state}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header]
    arrays = ckpt.arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt, copy=False).tobytes()
        nb, ds = name.encode(), dt.str.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(ds)), ds,
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                  struct.pack("<Q", len(data)), data]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise CheckpointCorruptError("checkpoint truncated: shorter than its fixed preamble")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checkpoint CRC mismatch (truncated or corrupted file)")
    r = _Reader(body)
    r.take(8)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {e}") from None
    groups: dict[str, dict[str, np.ndarray]] = {attr: {} for attr in GROUPS.values()}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (dlen,) = r.unpack("<B")
        dtype = np.dtype(r.take(dlen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointCorruptError(f"array {name}: byte count {nbytes} does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        group, _, key = name.partition("/")
        if group not in GROUPS:
            raise CheckpointCorruptError(f"unknown array group in {name!r}")
        groups[GROUPS[group]][key] = arr
    if r.pos != len(body):
        raise CheckpointCorruptError(f"{len(body) - r.pos} trailing bytes after the last array")
    return Checkpoint(header["config"], header["epoch"], header["step"], header["rng_state"],
                      version=version, **groups)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a reader never sees a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
