"""Binary prototype bank files (``.pbank``).

Layout: 8-byte magic ``PBANK\\0\\0\\1``, little-endian u32 K, u32 D, then K*D
little-endian float32 raw weights in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PBANK\x00\x00\x01"
_HEADER = struct.Struct("<8sII")


def encode_pbank(weights) -> bytes:
    w = np.asarray(weights)
    if w.ndim != 2:
        raise FormatError(f"prototype matrix must be 2-D, got shape {w.shape}")
    K, D = w.shape
    return _HEADER.pack(MAGIC, K, D) + np.ascontiguousarray(w, dtype="<f4").tobytes()


def decode_pbank(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for a .pbank header")
    magic, K, D = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * K * D
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes for K={K}, D={D}, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(K, D).astype(np.float64)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_pbank(path, weights) -> None:
    atomic_write_bytes(path, encode_pbank(weights))


def read_pbank(path) -> np.ndarray:
    return decode_pbank(Path(path).read_bytes())


def as_stored(weights) -> np.ndarray:
    """The float64 view of ``weights`` after a float32 round trip."""
    return np.asarray(weights, dtype="<f4").astype(np.float64)
