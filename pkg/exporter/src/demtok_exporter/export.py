"""Batch token export: DEM tile PNGs in, DEMTOK1 files out.

Each tile is converted to grayscale in [0, 1], replicated to three channels,
padded bottom/right to a multiple of the model's patch size (white, i.e.
unobserved), and encoded.  Token positions are the patch-grid pixel centers
in original tile coordinates.
"""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from .models import ModelLoadError, load_model
from .tilepng import TileFormatError, read_tile_intensity

TOKEN_MAGIC = b"DEMTOK1\x00"


def write_tokens(path: Path, positions: np.ndarray, features: np.ndarray,
                 patch_px: int) -> None:
    """DEMTOK1: magic, u32 count, u32 D, u32 patch_px, then little-endian
    records of (f32 row, f32 col, D x f32 feature)."""
    positions = np.asarray(positions, dtype="<f4").reshape(-1, 2)
    features = np.asarray(features, dtype="<f4")
    n, dim = features.shape
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<III", n, dim, patch_px))
        f.write(np.hstack([positions, features]).astype("<f4").tobytes())


def encode_tile_tokens(model, tile_png: Path, out_path: Path) -> int:
    """Encode one tile; returns the token count."""
    gray = read_tile_intensity(tile_png)
    h, w = gray.shape
    p = model.patch_px
    pad_h = (-h) % p
    pad_w = (-w) % p
    if pad_h or pad_w:
        gray = np.pad(gray, ((0, pad_h), (0, pad_w)), constant_values=1.0)
    image = np.repeat(gray[None], 3, axis=0)
    features = model.encode(image)
    hh, ww = gray.shape
    n_r, n_c = hh // p, ww // p
    half = (p - 1) / 2.0
    rows = np.repeat(np.arange(n_r), n_c) * p + half
    cols = np.tile(np.arange(n_c), n_r) * p + half
    write_tokens(out_path, np.column_stack([rows, cols]), features, p)
    return features.shape[0]


def export_tokens(tiles_dir: Path, out_dir: Path, model) -> tuple[int, int]:
    """Encode every tile PNG in a directory; returns (ok, failed) counts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = failed = 0
    for tile in sorted(tiles_dir.glob("*.png")):
        out_path = out_dir / (tile.stem + ".tok")
        try:
            n = encode_tile_tokens(model, tile, out_path)
        except (TileFormatError, OSError, ValueError) as exc:
            print(f"error: {tile.name}: {exc}", file=sys.stderr)
            failed += 1
            continue
        print(f"{tile.name}: {n} tokens -> {out_path.name}")
        ok += 1
    return ok, failed


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="demtok-export",
        description="Run a vision model over DEM tile PNGs and write "
                    "DEMTOK1 token files.")
    parser.add_argument("--tiles", required=True, help="input tile directory")
    parser.add_argument("--out", required=True, help="output token directory")
    parser.add_argument("--model", default="gradproj-64",
                        help="gradproj-<dim> or hf:<repo> (default %(default)s)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--patch", type=int, default=None,
                        help="patch size override for gradproj models")
    args = parser.parse_args(argv)

    tiles_dir = Path(args.tiles)
    if not tiles_dir.is_dir():
        print(f"error: tile directory not found: {tiles_dir}", file=sys.stderr)
        return 2
    try:
        model = load_model(args.model, device=args.device, patch_px=args.patch)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    ok, failed = export_tokens(tiles_dir, Path(args.out), model)
    if ok == 0:
        print("error: no tile encoded successfully", file=sys.stderr)
        return 1
    print(f"encoded {ok} tiles ({failed} failed)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
