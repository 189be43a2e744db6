"""Binary checkpoint container for named float tensors plus a JSON config.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"RAWLDMCK"
    version    u32       FORMAT_VERSION
    body_len   u64       number of body bytes that follow
    body:
      cfg_len  u32, then cfg_len bytes of UTF-8 JSON
      count    u32
      count x  [ name_len u16, name (UTF-8), dtype u8, ndim u8,
                 dims u32 * ndim, nbytes u64, payload (row-major, little-endian) ]
    crc32      u32       zlib.crc32 of the body

Load checks, in order: magic, version, length (truncation), CRC.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import BadMagicError, ChecksumError, CheckpointError, TruncatedCheckpointError, VersionMismatchError

MAGIC = b"RAWLDMCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def config_hash(self) -> str:
        blob = json.dumps({"kind": self.kind, "config": self.config}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _encode_body(ckpt: Checkpoint) -> bytes:
    parts = []
    cfg = json.dumps({"kind": ckpt.kind, "config": ckpt.config}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        parts.append(struct.pack("<HBB", len(raw_name), _CODES[dt], arr.ndim))
        parts.append(raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    body = _encode_body(ckpt)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(body)))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint body is internally inconsistent")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not MAGIC.startswith(data[:len(MAGIC)]):
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError(f"{path}: file ends inside the header")
    _, version, body_len = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    end = _HEADER.size + body_len
    if len(data) < end + 4:
        raise TruncatedCheckpointError(f"{path}: expected {end + 4} bytes, found {len(data)}")
    body = data[_HEADER.size:end]
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch (stored {crc:#010x}, computed {zlib.crc32(body):#010x})")
    r = _Reader(body)
    (cfg_len,) = r.unpack("<I")
    meta = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        name_len, code, ndim = r.unpack("<HBB")
        name = r.take(name_len).decode("utf-8")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = arr.astype(_DTYPES[code].newbyteorder("="), copy=True)
    return Checkpoint(meta["kind"], meta["config"], tensors)


def module_checkpoint(kind: str, module, config: dict) -> Checkpoint:
    return Checkpoint(kind, config, OrderedDict((k, v.copy()) for k, v in module.state_dict().items()))
