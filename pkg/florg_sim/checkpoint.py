"""
Binary checkpoint of a run: config, round index and named fp64 matrices.

Layout (all integers little-endian):

    magic        8 bytes   b"FLORGCK\\x00"
    version      u32
    config_len   u32, then config_len bytes of UTF-8 JSON
    round        u32
    count        u32
    count times:
        name_len u16, then name_len bytes of UTF-8 name
        rows     u32
        cols     u32
        data     rows * cols little-endian float64, row-major
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import CheckpointError
from .linalg import Matrix
from . import mylogger

logger = mylogger.get_logger(__name__)

MAGIC = b"FLORGCK\x00"
VERSION = 1
FP64 = np.dtype("<f8")
BYTES_PER_PARAM = FP64.itemsize


@dataclass(frozen=True)
class Checkpoint:
    config: dict
    round_idx: int
    matrices: Dict[str, Matrix]


def _encode_matrix(name: str, m: Matrix) -> bytes:
    m = np.asarray(m)
    if m.ndim != 2:
        raise CheckpointError(f"matrix {name!r} must be 2-D, got ndim={m.ndim}")
    encoded_name = name.encode("utf-8")
    header = struct.pack("<H", len(encoded_name)) + encoded_name + struct.pack("<II", *m.shape)
    return header + np.ascontiguousarray(m, dtype=FP64).tobytes(order="C")


def encode_payload(matrices: Mapping[str, Matrix]) -> bytes:
    """Matrix section only, in the given order; what a client or server puts on the wire."""
    return b"".join(_encode_matrix(name, m) for name, m in matrices.items())


def payload_nbytes(matrices: Mapping[str, Matrix]) -> int:
    """Size of the fp64 data carried by a payload, headers excluded."""
    return BYTES_PER_PARAM * int(sum(np.asarray(m).size for m in matrices.values()))


def dumps(checkpoint: Checkpoint) -> bytes:
    config = json.dumps(checkpoint.config, sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(config)),
        config,
        struct.pack("<II", checkpoint.round_idx, len(checkpoint.matrices)),
        encode_payload(checkpoint.matrices),
    ])


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a florg checkpoint (bad magic)")
    version, config_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint config: {e}") from e
    round_idx, count = reader.unpack("<II")
    matrices: Dict[str, Matrix] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rows, cols = reader.unpack("<II")
        data = np.frombuffer(reader.take(rows * cols * BYTES_PER_PARAM), dtype=FP64)
        matrices[name] = data.reshape(rows, cols).astype(np.float64)
    if reader.pos != len(blob):
        raise CheckpointError(f"{len(blob) - reader.pos} trailing bytes after the last matrix")
    return Checkpoint(config=config, round_idx=round_idx, matrices=matrices)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> int:
    """Write the checkpoint and return its size in bytes."""
    blob = dumps(checkpoint)
    path = Path(path)
    try:
        path.write_bytes(blob)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} ({len(blob)} bytes, {len(checkpoint.matrices)} matrices)")
    return len(blob)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return loads(blob)
