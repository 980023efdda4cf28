"""Binary raster formats.

``.qsrt`` tensor layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"QSRT"
    4       1           version (0x01)
    5       1           dtype (0x00 float32, 0x01 float64)
    6       1           rank
    7       8 * rank    dimensions, uint64 each
    ...     prod(dims) * itemsize   row-major payload

Human-viewable exports are 16-bit binary PGM files (``P5``, maxval 65535,
big-endian samples as PGM requires) with a JSON sidecar that records the scale
factor used to map raster values to gray levels.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QSRT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Raised for malformed, truncated or unsupported binary files."""


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def read_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if len(buf) - offset < 7:
        raise FormatError(
            f"truncated tensor header at offset {offset}: expected 7 bytes, "
            f"got {len(buf) - offset}")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic at offset {offset}: {buf[offset:offset + 4]!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version} at offset {offset + 4}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} at offset {offset + 5}")
    pos = offset + 7
    if len(buf) - pos < 8 * rank:
        raise FormatError(
            f"truncated tensor dimensions at offset {pos}: expected {8 * rank} bytes, "
            f"got {len(buf) - pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"truncated tensor payload at offset {pos}: expected {nbytes} bytes, "
            f"got {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def decode_tensor(buf: bytes) -> np.ndarray:
    array, end = read_tensor(buf)
    if end != len(buf):
        raise FormatError(f"trailing data after tensor: {len(buf) - end} bytes")
    return array


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_pgm(path, image, marks=None) -> dict:
    """Write ``image`` as an auto-scaled 16-bit PGM plus a ``.json`` sidecar.

    ``marks`` is an optional list of ``(row, col)`` positions drawn as
    full-white crosses (the marker channel of fitted overlays).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    lo = float(image.min())
    span = float(image.max()) - lo
    scale = 65535.0 / span if span > 0 else 0.0
    gray = np.round((image - lo) * scale).astype(">u2")
    if marks:
        for r, c in marks:
            r, c = int(round(r)), int(round(c))
            for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < gray.shape[0] and 0 <= cc < gray.shape[1]:
                    gray[rr, cc] = 65535
    buf = io.BytesIO()
    buf.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n65535\n".encode("ascii"))
    buf.write(gray.tobytes())
    path = Path(path)
    path.write_bytes(buf.getvalue())
    # value = gray / scale + offset
    meta = {"offset": lo, "scale": scale, "maxval": 65535}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return meta


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, into a float64 array of gray levels."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM file: {path}")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return pixels.reshape(height, width).astype(np.float64)
