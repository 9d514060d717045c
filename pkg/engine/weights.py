"""
Weight File Module

Reader and writer for the AQSW tensor container:

    magic  b"AQSW"
    u32    version
    u32    tensor count
    per tensor:
        u32    name length, UTF-8 name
        u32    rank, u32 x rank dims
        f32    payload, little-endian, C order

All integers are little-endian.
"""
from collections import OrderedDict
from typing import Dict, Mapping
import hashlib
import logging
import os
import struct

import numpy as np

from utils.error_utils import WeightFormatError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MAGIC = b"AQSW"
VERSION = 1


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    """Cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.buffer):
            raise WeightFormatError(
                f"Unexpected end of file while reading {what}",
                {'offset': self.offset, 'needed': size, 'available': len(self.buffer) - self.offset}
            )
        chunk = self.buffer[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_weights(buffer: bytes) -> "OrderedDict[str, np.ndarray]":
    """
    Parse an AQSW buffer.

    Raises:
        WeightFormatError: On bad magic, unknown version, truncation or bad names;
            details carry the byte offset
    """
    reader = _Reader(buffer)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise WeightFormatError("Not an AQSW file (bad magic)", {'offset': 0, 'found': magic.hex()})
    version_offset = reader.offset
    version = reader.u32("version")
    if version != VERSION:
        raise WeightFormatError(f"Unsupported AQSW version {version}", {'offset': version_offset})
    count = reader.u32("tensor count")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name_offset = reader.offset
        name_bytes = reader.take(reader.u32("name length"), "name")
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError("Tensor name is not valid UTF-8", {'offset': name_offset + 4})
        if name in tensors:
            raise WeightFormatError(f"Duplicate tensor name '{name}'", {'offset': name_offset})
        rank = reader.u32("rank")
        dims = [reader.u32("dimension") for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * size, f"payload of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)

    if reader.offset != len(buffer):
        raise WeightFormatError("Trailing bytes after the last tensor", {'offset': reader.offset})
    return tensors


def save_weights(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to an AQSW file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_weights(tensors))
    logger.info(f"Saved {len(tensors)} tensors to {path}")


def load_weights(path: str) -> "OrderedDict[str, np.ndarray]":
    """Read named arrays from an AQSW file."""
    with open(path, "rb") as f:
        tensors = decode_weights(f.read())
    logger.info(f"Loaded {len(tensors)} tensors from {path}")
    return tensors


def parameter_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and float32 bytes, in key order."""
    digest = hashlib.sha256()
    for name, array in tensors.items():
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(np.shape(array))).encode("ascii"))
        digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return digest.hexdigest()


def select(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Entries whose names start with `prefix`."""
    return {name: value for name, value in tensors.items() if name.startswith(prefix)}
