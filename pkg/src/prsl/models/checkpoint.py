"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"PRSLCKPT"
    8       4     format version (uint32), currently 1
    12      8     header length H in bytes (uint64)
    20      8     payload length P in bytes (uint64)
    28      H     header: UTF-8 JSON {"spec", "metadata", "params": [{"name", "shape"}]}
    28+H    P     payload: each parameter's float64 values, little-endian,
                  row-major, concatenated in header order
    28+H+P  32    SHA-256 of bytes [0, 28+H+P)

Loading checks, in order: truncation of the fixed prefix, magic, version,
declared lengths against the file size, then the checksum.  Nothing is
returned unless every check passes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from ..numerics import ParamStore
from .specs import spec_from_dict

MAGIC = b"PRSLCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    spec: object
    params: ParamStore
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def equals(self, other: "Checkpoint") -> bool:
        return (
            self.version == other.version
            and self.spec == other.spec
            and self.metadata == other.metadata
            and self.params.equals(other.params)
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.params.items()],
    }
    header_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(v.astype("<f8").tobytes() for v in ckpt.params.values())
    body = _PREFIX.pack(MAGIC, ckpt.version, len(header_raw), len(payload)) + header_raw + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomically write ``ckpt`` to ``path``."""
    data = checkpoint_bytes(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than the fixed checkpoint prefix")
    magic, version, header_len, payload_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    expected = _PREFIX.size + header_len + payload_len + _DIGEST
    if len(data) < expected:
        raise CheckpointTruncatedError(f"checkpoint has {len(data)} bytes, header declares {expected}")
    if len(data) > expected:
        raise CheckpointError(f"{len(data) - expected} trailing bytes after checkpoint")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch")

    header = json.loads(body[_PREFIX.size:_PREFIX.size + header_len].decode())
    offset = _PREFIX.size + header_len
    params = ParamStore()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        params.add(entry["name"], values.astype(np.float64).reshape(shape))
        offset += 8 * count
    if offset != len(body):
        raise CheckpointError("payload length disagrees with parameter shapes")
    return Checkpoint(spec_from_dict(header["spec"]), params, header["metadata"], version)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
