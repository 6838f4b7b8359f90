"""Versioned binary checkpoint with an embedded config and CRC32 integrity.

Layout (little-endian):
    magic  b"MLTR"
    u32    format version (currently 1)
    u32    config JSON byte length, then the canonical JSON bytes
    u32    tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   dtype code (0 = float32, 1 = float64)
        u8   rank
        u32  per-axis sizes
        raw  little-endian payload
    u32    CRC32 of every preceding byte

Save -> load -> save is byte-identical; loads verify the checksum and fail
closed on future versions.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict

import numpy as np

from mltr.errors import CheckpointError

MAGIC = b"MLTR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def canonical_config_bytes(config_doc: dict) -> bytes:
    return json.dumps(config_doc, sort_keys=True, separators=(",", ":")).encode()


def write_checkpoint(path, config_doc: dict, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = canonical_config_bytes(config_doc)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("corrupt checkpoint: truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError("corrupt checkpoint: too short")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    cur = _Cursor(blob[:-4])
    if cur.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = cur.unpack("<I")
    if version > VERSION:
        raise CheckpointError(f"checkpoint version {version} is newer than supported {VERSION}")
    (cfg_len,) = cur.unpack("<I")
    config_doc = json.loads(cur.take(cfg_len).decode())
    (count,) = cur.unpack("<I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode()
        code, ndim = cur.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unknown dtype code {code}")
        shape = cur.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(cur.take(n_bytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.copy()
    if cur.pos != len(cur.blob):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return config_doc, tensors


def save_model(path, model, config_doc: dict) -> None:
    tensors = {name: t.data for name, t in model.params().items()}
    write_checkpoint(path, config_doc, tensors)


def load_into_model(path, model) -> dict:
    """Assign checkpoint tensors into an already-built model.

    Fails with the full named diff when tensors are missing, unexpected,
    or shaped differently.
    """
    config_doc, tensors = read_checkpoint(path)
    own = model.params()
    missing = sorted(set(own) - set(tensors))
    unexpected = sorted(set(tensors) - set(own))
    shape_diff = sorted(
        name for name in set(own) & set(tensors)
        if own[name].data.shape != tensors[name].shape)
    if missing or unexpected or shape_diff:
        lines = []
        if missing:
            lines.append("missing: " + ", ".join(missing))
        if unexpected:
            lines.append("unexpected: " + ", ".join(unexpected))
        if shape_diff:
            lines.append("shape mismatch: " + ", ".join(
                f"{n} {tensors[n].shape} != {tuple(own[n].data.shape)}"
                for n in shape_diff))
        raise CheckpointError(f"checkpoint {path} does not fit the model; "
                              + "; ".join(lines))
    for name, t in own.items():
        t.data = tensors[name].astype(t.data.dtype, copy=True)
    return config_doc
