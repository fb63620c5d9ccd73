"""Binary PPM (P6) codec and small image helpers shared across modules.

Images are float64 arrays shaped (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import os

import numpy as np


class PPMError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half up."""
    v = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return v.astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError("unexpected end of PPM header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise PPMError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PPMError(f"bad PPM {name}: {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise PPMError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise PPMError(f"bad PPM size {width}x{height}")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    body = buf[pos:pos + need]
    if len(body) != need:
        raise PPMError(f"truncated PPM pixel data: {len(body)} of {need} bytes")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return from_uint8(pixels)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PPMError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of the two leading axes.

    Output pixel (i, j) samples the source at
    (i * (h - 1) / (height - 1), j * (w - 1) / (width - 1)), so the four
    corners coincide exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[:2]
    if (h, w) == (height, width):
        return values.copy()

    def axis(src: int, dst: int):
        if dst == 1 or src == 1:
            pos = np.zeros(dst)
        else:
            pos = np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.minimum(np.floor(pos).astype(int), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    extra = (1,) * (values.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    # a + (b - a) * t keeps constant regions exactly constant
    a, b = values[r0][:, c0], values[r0][:, c1]
    top = a + (b - a) * fc
    a, b = values[r1][:, c0], values[r1][:, c1]
    bottom = a + (b - a) * fc
    return top + (bottom - top) * fr
