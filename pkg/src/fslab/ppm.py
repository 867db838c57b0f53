"""Binary PPM (P6) reading and writing."""

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(buf, count, pos):
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos


def decode_ppm(buf):
    """Bytes -> float array ``(3, H, W)`` scaled to [0, 1]."""
    if buf[:2] != b"P6":
        raise PPMError("not a binary PPM (missing P6 magic)")
    try:
        (w, h, maxval), pos = _tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PPMError(f"malformed PPM header: {exc}") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise PPMError(f"invalid PPM dimensions {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise PPMError(f"PPM raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w, 3).astype(np.float64) / maxval
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_ppm(pixels):
    """Float array ``(3, H, W)`` in [0, 1] -> 8-bit P6 bytes."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise PPMError(f"expected (3, H, W) pixels, got {arr.shape}")
    _, h, w = arr.shape
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))
