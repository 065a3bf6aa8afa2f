"""Binary checkpoint format.

Layout: ``b"SLIM"``, a little-endian uint32 format version, a uint32 header
length, the UTF-8 JSON header, then every tensor as little-endian float32 in
the order the header lists them.  The header carries a sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoder import DimTable, Encoder, EncoderConfig, param_shapes
from .errors import CorruptCheckpoint
from .tensor import Tensor

MAGIC = b"SLIM"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def encode_checkpoint(encoder: Encoder, phase: str = "") -> bytes:
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes()
                       for p in encoder.params.values())
    header = {
        "config": encoder.config.to_dict(),
        "config_digest": encoder.config.digest(),
        "dims": encoder.dims().to_dict(),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "phase": phase,
        "tensors": [[name, list(p.shape)] for name, p in encoder.params.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save_checkpoint(encoder: Encoder, path, phase: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(encoder, phase))
    return path


def decode_checkpoint(raw: bytes):
    """Parse checkpoint bytes into ``(encoder, header)``."""
    if len(raw) < _PREFIX.size:
        raise CorruptCheckpoint("file too short")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    body = _PREFIX.size + head_len
    if len(raw) < body:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:body].decode())
        config = EncoderConfig.from_dict(header["config"])
        dims = DimTable.from_dict(header["dims"])
        listed = [(name, tuple(shape)) for name, shape in header["tensors"]]
        expected = list(param_shapes(config, dims).items())
    except Exception as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    if listed != expected:
        raise CorruptCheckpoint("header dimension table does not match the tensor list")
    total = sum(int(np.prod(s)) for _, s in listed)
    if len(raw) - body != 4 * total:
        raise CorruptCheckpoint(
            f"payload holds {len(raw) - body} bytes, header declares {4 * total}")
    if hashlib.sha256(raw[body:]).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpoint("payload checksum mismatch")
    params = {}
    offset = body
    for name, shape in listed:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor._wrap(arr.astype(np.float32))
        offset += 4 * count
    enc = Encoder(config, dims.head_dims, dims.mlp_dims, params)
    return enc, header


def load_checkpoint(path) -> Encoder:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(raw)[0]


def read_header(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())[1]
