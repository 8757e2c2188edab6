"""
Checkpoint storage for parameter stores.

File layout (all integers little-endian):

    magic      6 bytes   b"RLBK1\\0"
    version    u32       1
    meta_len   u32       length of the metadata block
    metadata   meta_len  UTF-8 JSON {name: {dtype, shape, offset, trainable}}
    padding    to the next multiple of 64 bytes from the start of the file
    payload    raw little-endian scalars; every tensor starts at a 64-byte
               aligned offset relative to the payload start

Writes go through a temporary file and an atomic rename.
"""

import json
import logging
import math
import os
import struct
import threading
from typing import Any, Dict, List, Tuple

import numpy as np

from nn_core import ParamStore

MAGIC = b"RLBK1\x00"
FORMAT_VERSION = 1
ALIGNMENT = 64
_HEADER = struct.Struct("<6sII")
_DTYPES = {"float32": "<f4", "float64": "<f8"}

# Lock for thread-safe file operations
_lock = threading.Lock()
_logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """Base class for malformed checkpoint containers."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMetadataError(CheckpointError):
    pass


class CheckpointBoundsError(CheckpointError):
    pass


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def encode_checkpoint(store: ParamStore) -> bytes:
    """Serialise a store into container bytes."""
    metadata: Dict[str, Dict[str, Any]] = {}
    chunks: List[Tuple[int, bytes]] = []
    offset = 0
    for name, param in store.items():
        data = param.tensor.data
        dtype = str(data.dtype)
        if dtype not in _DTYPES:
            raise CheckpointMetadataError(f"Tensor '{name}' has unsupported dtype {dtype}")
        offset = _align(offset)
        raw = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
        metadata[name] = {"dtype": dtype, "shape": list(data.shape), "offset": offset,
                          "trainable": bool(param.trainable)}
        chunks.append((offset, raw))
        offset += len(raw)

    meta_bytes = json.dumps(metadata, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)) + meta_bytes
    payload_start = _align(len(header))
    payload = bytearray(offset)
    for start, raw in chunks:
        payload[start:start + len(raw)] = raw
    return header + b"\x00" * (payload_start - len(header)) + bytes(payload)


def _validate_entry(name: str, entry: Any) -> Tuple[str, Tuple[int, ...], int, bool]:
    if not isinstance(entry, dict):
        raise CheckpointMetadataError(f"Metadata for '{name}' is not an object")
    dtype, shape = entry.get("dtype"), entry.get("shape")
    offset, trainable = entry.get("offset"), entry.get("trainable")
    if not isinstance(dtype, str) or dtype not in _DTYPES:
        raise CheckpointMetadataError(f"Tensor '{name}' has unsupported dtype {dtype!r}")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                              for s in shape):
        raise CheckpointMetadataError(f"Tensor '{name}' has invalid shape {shape!r}")
    if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
        raise CheckpointMetadataError(f"Tensor '{name}' has invalid offset {offset!r}")
    if offset % ALIGNMENT:
        raise CheckpointBoundsError(f"Tensor '{name}' offset {offset} is not {ALIGNMENT}-byte aligned")
    if not isinstance(trainable, bool):
        raise CheckpointMetadataError(f"Tensor '{name}' has invalid trainable flag {trainable!r}")
    return dtype, tuple(shape), offset, trainable


def decode_checkpoint(blob: bytes) -> ParamStore:
    """Parse container bytes; every violation raises a CheckpointError subclass."""
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("Not a checkpoint: bad magic")
    if len(blob) < _HEADER.size:
        raise CheckpointBoundsError("Checkpoint header is truncated")
    _, version, meta_len = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    meta_end = _HEADER.size + meta_len
    if meta_end > len(blob):
        raise CheckpointBoundsError(f"Metadata block of {meta_len} bytes runs past the end of the file")
    try:
        metadata = json.loads(blob[_HEADER.size:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise CheckpointMetadataError(f"Metadata is not valid UTF-8 JSON: {e}")
    if not isinstance(metadata, dict):
        raise CheckpointMetadataError("Metadata must be a JSON object")

    payload_start = _align(meta_end)
    payload = blob[payload_start:] if payload_start <= len(blob) else b""
    entries = []
    for name, entry in metadata.items():
        dtype, shape, offset, trainable = _validate_entry(name, entry)
        nbytes = math.prod(shape) * np.dtype(_DTYPES[dtype]).itemsize
        entries.append((offset, offset + nbytes, name, dtype, shape, trainable))

    end = 0
    for start, stop, name, *_ in sorted(entries):
        if start < end:
            raise CheckpointBoundsError(f"Tensor '{name}' overlaps the previous tensor")
        end = max(end, stop)
    if end > len(payload):
        raise CheckpointBoundsError(f"Metadata describes {end} payload bytes but only {len(payload)} are present")
    if end != len(payload):
        raise CheckpointBoundsError(f"Payload length {len(payload)} does not match metadata ({end} bytes)")

    store = ParamStore()
    for start, stop, name, dtype, shape, trainable in entries:
        try:
            data = np.frombuffer(payload, dtype=_DTYPES[dtype],
                                 count=(stop - start) // np.dtype(_DTYPES[dtype]).itemsize,
                                 offset=start).reshape(shape)
            store.register(name, data.astype(dtype), trainable)
        except (ValueError, OverflowError) as e:
            # bad names, shapes numpy cannot represent
            raise CheckpointMetadataError(f"Tensor '{name}' cannot be restored: {e}")
    return store


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Write ``store`` to ``path`` atomically."""
    blob = encode_checkpoint(store)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with _lock:
        with open(tmp_path, "wb") as f:
            f.write(blob)
        os.replace(tmp_path, path)
    _logger.info(f"Saved checkpoint {path}: {len(store)} tensors, {len(blob)} bytes")


def load_checkpoint(path: str) -> ParamStore:
    with _lock:
        with open(path, "rb") as f:
            blob = f.read()
    store = decode_checkpoint(blob)
    _logger.info(f"Loaded checkpoint {path}: {len(store)} tensors")
    return store
