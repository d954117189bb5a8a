"""Binary PPM (P6) / PGM (P5) 8-bit I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(buf, count):
    # header tokens, skipping '#' comments; returns tokens and payload offset
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i >= len(buf):
            raise ImageFormatError("truncated header")
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte before the raster


def _read(path, magic, channels):
    buf = Path(path).read_bytes()
    (m, w, h, maxval), off = _tokens(buf, 4)
    if m != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} image, found {m.decode(errors='replace')}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images (maxval 255) are supported, got {maxval}")
    n = w * h * channels
    raster = buf[off : off + n]
    if len(raster) != n:
        raise ImageFormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr.copy()


def read_ppm(path):
    """Return an (H, W, 3) uint8 array."""
    return _read(path, b"P6", 3)


def read_pgm(path):
    """Return an (H, W) uint8 array."""
    return _read(path, b"P5", 1)[:, :, 0]


def _write(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_ppm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3), got {arr.shape}")
    _write(path, b"P6", arr)


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm expects (H, W), got {arr.shape}")
    _write(path, b"P5", arr)


def to_float(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def to_uint8(x):
    """Clamp to [0, 1] and quantize to 0..255, rounding halves up."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_rgb(path):
    """PPM file -> (3, H, W) float64 in [0, 1]."""
    return to_float(read_ppm(path)).transpose(2, 0, 1)


def save_rgb(path, chw):
    write_ppm(path, to_uint8(np.asarray(chw).transpose(1, 2, 0)))


def load_depth(path, depth_range=(0.5, 2.0)):
    """PGM depth -> (1, H, W) float64 rescaled linearly from [0, 255] to ``depth_range``."""
    d0, d1 = depth_range
    return (d0 + (d1 - d0) * to_float(read_pgm(path)))[None]


def load_gray(path):
    return to_float(read_pgm(path))[None]


def save_gray(path, x):
    write_pgm(path, to_uint8(np.asarray(x).reshape(np.asarray(x).shape[-2:])))
