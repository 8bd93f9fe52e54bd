"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"SNFG"
    version 2 bytes  (currently 1)
    4 bytes metadata length, then that many bytes of UTF-8 JSON
    4 bytes parameter count, then per parameter:
        2 bytes name length + UTF-8 name
        1 byte rank, then rank * 4 bytes of dims
        raw float32 values, row-major
    optional mask section (absent = EOF here):
        4 bytes mask entry count, then per entry:
            2 bytes name length + UTF-8 name
            1 byte rank, then rank * 4 bytes of dims
            ceil(n/8) bytes, 1 bit per entry, little-endian bit order

Metadata JSON is serialized canonically (sorted keys, no whitespace), so
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .model import EncoderConfig
from .params import ParameterTree

MAGIC = b"SNFG"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _write_named_header(fh: BinaryIO, name: str, shape: tuple[int, ...]) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", len(shape)))
    for dim in shape:
        fh.write(struct.pack("<I", dim))


def save_checkpoint(path: str, params: ParameterTree,
                    mask: dict[str, np.ndarray] | None = None,
                    metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    if "config" not in meta and isinstance(params.config, EncoderConfig):
        meta["config"] = params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            _write_named_header(fh, name, value.shape)
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        if mask is not None:
            fh.write(struct.pack("<I", len(mask)))
            for name in sorted(mask):
                bits = np.ascontiguousarray(mask[name], dtype=np.uint8)
                _write_named_header(fh, name, bits.shape)
                fh.write(np.packbits(bits.ravel(), bitorder="little").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"file ends inside {what}")
    return data


def _read_named_header(fh: BinaryIO, what: str) -> tuple[str, tuple[int, ...]]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"{what} name length"))
    name = _read_exact(fh, name_len, f"{what} name").decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{what} rank"))
    dims = tuple(struct.unpack("<I", _read_exact(fh, 4, f"{what} dim"))[0]
                 for _ in range(rank))
    return name, dims


def load_checkpoint(path: str) -> tuple[ParameterTree, dict[str, np.ndarray] | None, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"format version {version}, supported: {VERSION}")

        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))

        params = ParameterTree()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        for _ in range(count):
            name, dims = _read_named_header(fh, "parameter")
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, 4 * n, f"parameter {name!r} data")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

        mask: dict[str, np.ndarray] | None = None
        head = fh.read(4)
        if head:
            if len(head) != 4:
                raise TruncatedCheckpointError("file ends inside mask count")
            (mask_count,) = struct.unpack("<I", head)
            mask = {}
            for _ in range(mask_count):
                name, dims = _read_named_header(fh, "mask")
                n = int(np.prod(dims, dtype=np.int64)) if dims else 1
                raw = _read_exact(fh, (n + 7) // 8, f"mask {name!r} bitmap")
                bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                                     count=n, bitorder="little")
                mask[name] = bits.reshape(dims).astype(np.uint8)
            if fh.read(1):
                raise CheckpointError("trailing bytes after mask section")

    if "config" in metadata:
        params.config = EncoderConfig(**metadata["config"])
    return params, mask, metadata
