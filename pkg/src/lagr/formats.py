"""On-disk formats: the LAGT1 tensor container and 8-bit PGM images.

LAGT1 layout (little-endian throughout):

    bytes 0..4   magic ``LAGT1``
    bytes 5..20  four uint32 dims B, C, H, W
    rest         B*C*H*W float64 values, row-major (W fastest)

The format is deliberately dumb: fixed rank, fixed dtype, no compression,
so write -> read is a bitwise identity.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "lagt1_bytes",
    "load_lagt1",
    "load_pgm",
    "parse_lagt1",
    "save_lagt1",
    "save_pgm",
]

MAGIC = b"LAGT1"
_HEADER = struct.Struct("<4I")


class FormatError(ValueError):
    """Malformed or mismatched file content."""


def lagt1_bytes(data: np.ndarray) -> bytes:
    """Serialize a rank-4 float64 array to LAGT1 bytes."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise FormatError(f"LAGT1 stores rank-4 tensors, got rank {arr.ndim}")
    header = MAGIC + _HEADER.pack(*arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes(order="C")


def parse_lagt1(buf: bytes) -> np.ndarray:
    """Inverse of :func:`lagt1_bytes`."""
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not a LAGT1 buffer")
    off = len(MAGIC)
    dims = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    payload = buf[off:]
    if len(payload) != 8 * count:
        raise FormatError(
            f"payload holds {len(payload)} bytes, dims {dims} require {8 * count}"
        )
    flat = np.frombuffer(payload, dtype="<f8", count=count)
    return flat.astype(np.float64).reshape(dims)


def save_lagt1(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(lagt1_bytes(data))


def load_lagt1(path: str | Path) -> np.ndarray:
    return parse_lagt1(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PGM (P5, binary, 8-bit)
# ---------------------------------------------------------------------------

def save_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM writer takes a single-channel (H, W) image")
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.floating):
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        else:
            img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes(order="C"))


def load_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a (H, W) uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)")

    # Header tokens may be separated by arbitrary whitespace and interleaved
    # with '#' comment lines; scan token by token.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported, maxval {maxval}")
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
