"""LREP embedding files.

Layout (little-endian): ``b"LREP"``, u16 version (1), u16 length + UTF-8
source id, u32 dim, then ``dim`` float32 values.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"LREP"
VERSION = 1


def encode(source_id: str, values) -> bytes:
    sid = source_id.encode("utf-8")
    vals = np.asarray(values, dtype="<f4").reshape(-1)
    if vals.size == 0:
        raise FormatError("cannot encode an empty block")
    return MAGIC + struct.pack("<HH", VERSION, len(sid)) + sid + struct.pack("<I", vals.size) + vals.tobytes()


def decode(data: bytes) -> tuple[str, np.ndarray]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not an LREP file (bad magic)")
    version, n = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LREP version {version}")
    off = 8
    sid = data[off : off + n].decode("utf-8")
    off += n
    (dim,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + 4 * dim:
        raise FormatError(f"LREP payload size mismatch for {sid!r}: dim={dim}, {len(data) - off} bytes")
    return sid, np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float32)


def atomic_write(path: Path, data: bytes) -> None:
    """Write via a temp file + rename so concurrent readers never see partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_block(path, source_id: str, values) -> None:
    atomic_write(Path(path), encode(source_id, values))


def read_block(path) -> tuple[str, np.ndarray]:
    return decode(Path(path).read_bytes())
