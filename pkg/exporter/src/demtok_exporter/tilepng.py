"""Minimal reader for the DEM tile PNG interchange format.

Tiles are 16-bit grayscale+alpha PNGs: the gray plane holds linearly
quantized heights with 0 reserved for unobserved cells, and the alpha plane
is the validity mask.  This reader is self-contained so the exporter depends
only on the published file format.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


class TileFormatError(ValueError):
    pass


def _unfilter(data: bytes, height: int, stride: int, bpp: int) -> bytes:
    out = bytearray(height * stride)
    prev = bytearray(stride)
    pos = 0
    for row in range(height):
        ftype = data[pos]
        pos += 1
        line = bytearray(data[pos:pos + stride])
        pos += stride
        if ftype == 1:
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((a + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise TileFormatError(f"unsupported PNG filter {ftype}")
        out[row * stride:(row + 1) * stride] = line
        prev = line
    return bytes(out)


def read_png(path: str | Path) -> tuple[np.ndarray, int]:
    """Any non-interlaced PNG as (H, W, channels) plus its bit depth."""
    data = Path(path).read_bytes()
    if data[:8] != _PNG_SIG:
        raise TileFormatError(f"{path}: not a PNG")
    pos = 8
    header = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if header is None:
        raise TileFormatError(f"{path}: missing IHDR")
    w, h, depth, color_type, _, _, interlace = header
    if interlace:
        raise TileFormatError(f"{path}: interlaced PNG unsupported")
    if color_type not in _CHANNELS or depth not in (8, 16):
        raise TileFormatError(f"{path}: unsupported PNG layout")
    channels = _CHANNELS[color_type]
    bpp = channels * depth // 8
    raw = _unfilter(zlib.decompress(bytes(idat)), h, w * bpp, bpp)
    dtype = ">u2" if depth == 16 else "u1"
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    return arr.astype(np.uint16 if depth == 16 else np.uint8), depth


def read_tile_intensity(path: str | Path) -> np.ndarray:
    """Tile PNG to a float grayscale image in [0, 1].

    Observed cells map their quantized value linearly; unobserved cells
    render white, matching how the height maps are displayed.
    """
    arr, depth = read_png(path)
    full = float((1 << depth) - 1)
    if arr.shape[2] == 2:
        gray = arr[:, :, 0].astype(np.float64)
        valid = arr[:, :, 1] > 0
        out = np.ones(gray.shape)
        if depth == 16:
            out[valid] = np.clip((gray[valid] - 1.0) / 65534.0, 0.0, 1.0)
        else:
            out[valid] = gray[valid] / full
        return out
    if arr.shape[2] == 1:
        return arr[:, :, 0].astype(np.float64) / full
    # color previews: plain luma
    rgb = arr[:, :, :3].astype(np.float64) / full
    return 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
