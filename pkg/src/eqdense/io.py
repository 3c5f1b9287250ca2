"""EQT1 binary tensor container and atomic file writes.

Layout::

    b"EQT1" | u8 dtype code | u8 rank | rank x u64 LE dims | LE payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from eqdense.errors import FormatError

MAGIC = b"EQT1"

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def header_bytes(dtype, shape) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    if dt not in DTYPE_CODES:
        raise FormatError(f"dtype {dtype} has no EQT1 code")
    return MAGIC + struct.pack("<BB", DTYPE_CODES[dt], len(shape)) + struct.pack(
        f"<{len(shape)}Q", *shape
    )


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    return header_bytes(dt, arr.shape) + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _parse_header(buf: bytes, origin: str) -> tuple[np.dtype, tuple, int]:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError(f"{origin}: bad magic bytes")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"{origin}: unknown dtype code {code}")
    end = 6 + 8 * rank
    if len(buf) < end:
        raise FormatError(f"{origin}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    return CODE_DTYPES[code], tuple(int(d) for d in shape), end


def decode(buf: bytes, origin: str = "<bytes>") -> np.ndarray:
    dtype, shape, offset = _parse_header(buf, origin)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise FormatError(
            f"{origin}: payload is {len(buf) - offset} bytes, header implies {expected}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape).copy()


def load_tensor(path, mmap: bool = False) -> np.ndarray:
    """Read an EQT1 file; with ``mmap=True`` the payload is memory-mapped read-only."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(6 + 8 * 255)
    dtype, shape, offset = _parse_header(head, str(path))
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    size = path.stat().st_size
    if size - offset != expected:
        raise FormatError(f"{path}: payload is {size - offset} bytes, header implies {expected}")
    if mmap:
        if expected == 0:
            return np.zeros(shape, dtype=dtype)
        return np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)
    return decode(path.read_bytes(), str(path))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
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


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode(array))


def read_key_values(path) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_key_values(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())
