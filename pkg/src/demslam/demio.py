"""Tile persistence and preview rendering.

Tile files are 16-bit grayscale+alpha PNGs: heights are linearly quantized
over the tile's own [h_min, h_max] into 1..65535 with 0 reserved for EMPTY,
and the alpha channel is the validity plane (0 or 65535).  A JSON sidecar
carries the dequantization range and grid placement.  The PNG encoder is
self-contained so byte output depends only on the pixel payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .dem import DemGrid, DemParams, DemTile, IntensityGrid, assemble_dense
from .errors import FormatError
from .geometry import CanonicalFrame

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path: str | Path, channels: np.ndarray, bitdepth: int = 8) -> None:
    """Minimal deterministic PNG writer.

    ``channels`` is (H, W) for grayscale, (H, W, 2) gray+alpha, (H, W, 3)
    RGB or (H, W, 4) RGBA; dtype must fit the bit depth.
    """
    arr = np.asarray(channels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    color_type = {1: 0, 2: 4, 3: 2, 4: 6}[c]
    dtype = ">u2" if bitdepth == 16 else "u1"
    raw = arr.astype(dtype).tobytes()
    stride = w * c * (bitdepth // 8)
    lines = bytearray()
    for yy in range(h):
        lines.append(0)  # filter type 0 (None)
        lines += raw[yy * stride:(yy + 1) * stride]
    ihdr = struct.pack(">IIBBBBB", w, h, bitdepth, color_type, 0, 0, 0)
    data = (_PNG_SIG + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(bytes(lines), 9))
            + _chunk(b"IEND", b""))
    Path(path).write_bytes(data)


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> bytes:
    out = bytearray(h * stride)
    pos = 0
    prev = bytearray(stride)
    for yy in range(h):
        ftype = data[pos]
        pos += 1
        line = bytearray(data[pos:pos + stride])
        pos += stride
        if ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((a + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                cc = prev[i - bpp] if i >= bpp else 0
                p = a + b - cc
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - cc)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else cc)
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise FormatError(f"unsupported PNG filter {ftype}")
        out[yy * stride:(yy + 1) * stride] = line
        prev = line
    return bytes(out)


def read_png(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a non-interlaced PNG written by this package (or compatible).

    Returns:
        (array of shape (H, W, channels), bitdepth)
    """
    data = Path(path).read_bytes()
    if data[:8] != _PNG_SIG:
        raise FormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError(f"{path}: missing IHDR")
    w, h, bitdepth, color_type, _, _, interlace = ihdr
    if interlace:
        raise FormatError("interlaced PNG not supported")
    channels = {0: 1, 2: 3, 4: 2, 6: 4}[color_type]
    bpp = channels * (bitdepth // 8)
    stride = w * bpp
    raw = _unfilter(zlib.decompress(bytes(idat)), h, stride, bpp)
    dtype = ">u2" if bitdepth == 16 else "u1"
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    return arr.astype(np.uint16 if bitdepth == 16 else np.uint8), bitdepth


# -- tile files --------------------------------------------------------------

def tile_stem(submap_id: int, iu: int, iv: int) -> str:
    return f"s{submap_id:04d}_t{iu:05d}_{iv:05d}"


def save_tile(tile: DemTile, grid: DemGrid, params: DemParams,
              directory: str | Path, submap_id: int) -> Path:
    """Quantize one tile to PNG + JSON sidecar; returns the PNG path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    valid = tile.valid_mask()
    if valid.any():
        h_min = float(np.nanmin(tile.height))
        h_max = float(np.nanmax(tile.height))
    else:
        h_min = h_max = 0.0
    span = h_max - h_min
    q = np.zeros(tile.height.shape, dtype=np.uint16)
    if valid.any():
        if span > 0:
            q[valid] = 1 + np.round(
                (tile.height[valid] - h_min) / span * 65534.0).astype(np.uint16)
        else:
            q[valid] = 1
    alpha = np.where(valid, np.uint16(65535), np.uint16(0))
    stem = tile_stem(submap_id, tile.iu, tile.iv)
    png_path = directory / f"{stem}.png"
    write_png(png_path, np.stack([q, alpha], axis=-1), bitdepth=16)
    sidecar = {
        "I_u": tile.iu, "I_v": tile.iv, "mpp": grid.mpp,
        "bounds": list(grid.bounds), "h_min": h_min, "h_max": h_max,
        "reducer": params.reducer, "tau": params.tau,
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=1))
    return png_path


def load_tile(png_path: str | Path) -> tuple[DemTile, dict]:
    """Rebuild a tile from its PNG and sidecar.

    Hit counts are not stored on disk; observed cells reload with count 1.
    """
    png_path = Path(png_path)
    sidecar_path = png_path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    arr, bitdepth = read_png(png_path)
    if bitdepth != 16 or arr.shape[2] != 2:
        raise FormatError(f"{png_path}: expected 16-bit gray+alpha tile")
    q = arr[:, :, 0].astype(np.float64)
    valid = arr[:, :, 1] > 0
    h_min, h_max = float(meta["h_min"]), float(meta["h_max"])
    height = np.full(q.shape, np.nan)
    if h_max > h_min:
        height[valid] = h_min + (q[valid] - 1.0) / 65534.0 * (h_max - h_min)
    else:
        height[valid] = h_min
    hits = valid.astype(np.int64)
    tile = DemTile(int(meta["I_u"]), int(meta["I_v"]), height, hits)
    return tile, meta


def save_grid(grid: DemGrid, params: DemParams, directory: str | Path,
              submap_id: int) -> Path:
    """Write all tiles plus a per-grid manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for key in sorted(grid.tiles):
        path = save_tile(grid.tiles[key], grid, params, directory, submap_id)
        files.append(path.name)
    manifest = {
        "submap_id": submap_id,
        "bounds": list(grid.bounds),
        "mpp": grid.mpp,
        "tile_px": grid.tile_px,
        "target_px_long": grid.target_px_long,
        "rejected_points": grid.rejected_points,
        "params": {
            "reducer": params.reducer, "tau": params.tau,
            "norm_percentiles": list(params.norm_percentiles),
            "alpha_edge": params.alpha_edge,
        },
        "frame": None if grid.frame is None else {
            "R": [[float(x) for x in row] for row in grid.frame.R],
            "origin": [float(x) for x in grid.frame.origin],
        },
        "tiles": files,
    }
    path = directory / f"grid_s{submap_id:04d}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_grid(manifest_path: str | Path) -> tuple[DemGrid, DemParams]:
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    p = meta["params"]
    params = DemParams(
        target_px_long=int(meta["target_px_long"]), tile_px=int(meta["tile_px"]),
        reducer=p["reducer"], tau=float(p["tau"]),
        norm_percentiles=tuple(p["norm_percentiles"]),
        alpha_edge=float(p["alpha_edge"]),
    )
    frame = None
    if meta.get("frame"):
        frame = CanonicalFrame(np.array(meta["frame"]["R"]),
                               np.array(meta["frame"]["origin"]))
    grid = DemGrid(bounds=tuple(meta["bounds"]), mpp=float(meta["mpp"]),
                   tile_px=int(meta["tile_px"]),
                   target_px_long=int(meta["target_px_long"]), frame=frame,
                   rejected_points=int(meta.get("rejected_points", 0)))
    for name in meta["tiles"]:
        tile, _ = load_tile(manifest_path.parent / name)
        grid.tiles[(tile.iu, tile.iv)] = tile
    return grid, params


# -- previews ----------------------------------------------------------------

_CMAP_LOW = np.array([235.0, 225.0, 80.0])   # ground plane: yellow
_CMAP_HIGH = np.array([8.0, 72.0, 20.0])     # high structure: dark green


def render_preview(intensity: IntensityGrid, path: str | Path,
                   shading: IntensityGrid | None = None,
                   colormap: bool = False) -> None:
    """Assemble the full intensity grid into an 8-bit PNG preview.

    EMPTY cells render pure white.  ``shading`` multiplies in a hillshade
    layer; ``colormap`` switches to the yellow-green human-view palette
    (never an analysis input).
    """
    nu, nv = intensity.n_u, intensity.n_v
    dense = assemble_dense(intensity.tiles, intensity.tile_px, 0, 0, nu, nv)
    if shading is not None:
        sh = assemble_dense(shading.tiles, shading.tile_px, 0, 0, nu, nv)
        lit = ~np.isnan(dense) & ~np.isnan(sh)
        dense[lit] = dense[lit] * (0.3 + 0.7 * sh[lit])
    empty = np.isnan(dense)
    if colormap:
        rgb = np.empty(dense.shape + (3,), dtype=np.uint8)
        frac = np.nan_to_num(dense, nan=0.0)[..., None]
        ramp = _CMAP_LOW[None, None, :] * (1 - frac) + _CMAP_HIGH[None, None, :] * frac
        rgb[:] = np.clip(np.round(ramp), 0, 255).astype(np.uint8)
        rgb[empty] = 255
        write_png(path, rgb, bitdepth=8)
    else:
        gray = np.clip(np.round(np.nan_to_num(dense, nan=1.0) * 255.0), 0, 255).astype(np.uint8)
        gray[empty] = 255
        write_png(path, gray, bitdepth=8)
