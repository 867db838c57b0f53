"""FSLW1 weight container.

Layout (little-endian)::

    b"FSLW1"
    u32 header_len, header bytes (UTF-8 ``key=value`` lines)
    u32 count
    count x { u32 name_len, name bytes, u32 rank, rank x u32 dim, float64 data }
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FSLW1"


class CheckpointError(ValueError):
    pass


def write_container(path, arrays, header=None):
    header = header or {}
    for k, v in header.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"header entry {k!r} is not representable")
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path):
    """Returns ``(header, arrays)``; ``arrays`` preserves file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an FSLW1 file")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (hlen,) = take("<I")
    header = {}
    for line in buf[pos:pos + hlen].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    pos += hlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    return header, arrays
