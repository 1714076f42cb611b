"""Geometry-aware unit-norm descriptors for DEM tiles and query chips.

Descriptors are Gaussian-weighted, visibility-masked means of patch-token
features: v = sum_j(w_j m_j f_j) / sum_j(w_j m_j), L2-normalized.  The token
source is pluggable: a deterministic built-in gradient-histogram encoder, or
tokens precomputed by an external model and loaded from DEMTOK1 files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from .dem import IntensityGrid, _fill_nearest, assemble_dense
from .errors import AllEmptyRegion, FormatError, InvalidSigma, NoSalientContent

TOKEN_MAGIC = b"DEMTOK1\x00"
DESC_MAGIC = b"DEMDSC1\x00"

BUILTIN_D = 16  # 8 orientation bins + mean/var + empty fraction, zero-padded


@dataclass(frozen=True)
class EncoderSpec:
    """Which token source to use and its dimensions."""

    kind: str = "builtin-gradhist"
    dim: int = BUILTIN_D
    patch_px: int = 16

    def __post_init__(self):
        if self.kind not in ("builtin-gradhist", "precomputed-tokens"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 8:
            raise ValueError("descriptor dimension must be >= 8")
        if self.patch_px < 1:
            raise ValueError("patch size must be >= 1")


def _pad_to_patches(region: np.ndarray, patch_px: int) -> np.ndarray:
    """Pad bottom/right with NaN so both sides divide the patch size."""
    h, w = region.shape
    ph = (-h) % patch_px
    pw = (-w) % patch_px
    if ph or pw:
        region = np.pad(region, ((0, ph), (0, pw)), constant_values=np.nan)
    return region


def _as_patches(arr: np.ndarray, patch_px: int) -> np.ndarray:
    """(H, W) -> (n_patches, patch_px*patch_px), row-major patch order."""
    h, w = arr.shape
    n_r, n_c = h // patch_px, w // patch_px
    return (arr.reshape(n_r, patch_px, n_c, patch_px)
            .transpose(0, 2, 1, 3).reshape(n_r * n_c, patch_px * patch_px))


def _patch_grid_stats(region: np.ndarray, patch_px: int):
    """Vectorized per-patch statistics over an aligned patch grid.

    Returns positions (patch pixel centers), magnitude-weighted orientation
    histograms, intensity mean/variance over observed pixels, empty fraction,
    and mean gradient magnitude (empty pixels contribute zero gradient).

    Raises:
        AllEmptyRegion: the region has no observed pixels.
    """
    region = np.asarray(region, dtype=float)
    if not np.any(~np.isnan(region)):
        raise AllEmptyRegion("region has no observed pixels")
    region = _pad_to_patches(region, patch_px)
    h, w = region.shape
    empty = np.isnan(region)

    # gradients on nearest-filled values, then zeroed at empty pixels
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    filled = _fill_nearest(region)
    gx = scipy.ndimage.convolve(filled, kx, mode="nearest")
    gy = scipy.ndimage.convolve(filled, kx.T, mode="nearest")
    gx[empty] = 0.0
    gy[empty] = 0.0
    mag = np.sqrt(gx * gx + gy * gy)
    ori = np.arctan2(gy, gx)
    bins = np.clip(((ori + np.pi) / (2.0 * np.pi / 8.0)).astype(np.int64), 0, 7)

    p2 = patch_px * patch_px
    vals = _as_patches(region, patch_px)
    mag_p = _as_patches(mag, patch_px)
    bin_p = _as_patches(bins.astype(float), patch_px).astype(np.int64)
    ok = ~np.isnan(vals)
    cnt = ok.sum(axis=1)
    safe = np.maximum(cnt, 1)
    mean = np.where(cnt > 0, np.nansum(vals, axis=1) / safe, 0.0)
    sq = np.where(cnt > 0, np.nansum(vals * vals, axis=1) / safe, 0.0)
    var = np.where(cnt > 1, np.maximum(sq - mean * mean, 0.0), 0.0)
    empty_frac = 1.0 - cnt / p2
    hist = np.zeros((vals.shape[0], 8))
    for b in range(8):
        hist[:, b] = np.sum(mag_p * (bin_p == b), axis=1)
    mean_grad = mag_p.mean(axis=1)

    n_r, n_c = h // patch_px, w // patch_px
    half = (patch_px - 1) / 2.0
    rows = (np.repeat(np.arange(n_r), n_c) * patch_px + half)
    cols = (np.tile(np.arange(n_c), n_r) * patch_px + half)
    positions = np.column_stack([rows, cols])
    return positions, hist, mean, var, empty_frac, mean_grad, mag, region


def encode_builtin(region: np.ndarray, patch_px: int,
                   dim: int = BUILTIN_D) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-patch features over an intensity region.

    Each patch yields a magnitude-weighted 8-bin gradient orientation
    histogram, the mean and variance of its observed intensities, and its
    empty fraction, zero-padded to ``dim``.  Token positions are patch pixel
    centers (row, col) in region coordinates.

    Returns:
        (positions (N, 2), features (N, dim))

    Raises:
        AllEmptyRegion: the region has no observed pixels.
    """
    positions, hist, mean, var, empty_frac, _, _, _ = _patch_grid_stats(
        region, patch_px)
    features = np.zeros((positions.shape[0], dim))
    features[:, :8] = hist
    features[:, 8] = mean
    features[:, 9] = var
    features[:, 10] = empty_frac
    return positions, features


def gaussian_weights(positions: np.ndarray, center: np.ndarray,
                     sigma: float) -> np.ndarray:
    """Unnormalized positional weights exp(-||pos - center||^2 / (2 sigma^2)).

    Raises:
        InvalidSigma: sigma <= 0.
    """
    if sigma <= 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    d2 = np.sum((np.asarray(positions, dtype=float)
                 - np.asarray(center, dtype=float)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def visibility_mask(region: np.ndarray, positions: np.ndarray,
                    patch_px: int) -> np.ndarray:
    """Per-token salience from local gradient magnitude.

    m_j is the mean gradient magnitude over the token's patch (empty pixels
    contribute zero) normalized by the 99th-percentile gradient over the
    region's observed pixels, clipped to [0, 1]; all-empty patches get 0.
    Tokens on the canonical patch grid take a vectorized path; arbitrary
    positions (foreign token layouts) fall back to per-token slicing.
    """
    region = _pad_to_patches(np.asarray(region, dtype=float), patch_px)
    positions = np.asarray(positions, dtype=float)
    half = (patch_px - 1) / 2.0

    grid_pos, _, _, _, empty_frac, mean_grad, mag, padded = _patch_grid_stats(
        region, patch_px)
    valid = ~np.isnan(padded)
    norm = float(np.percentile(mag[valid], 99.0)) if valid.any() else 0.0
    if norm <= 0.0:
        return np.zeros(len(positions))
    if positions.shape == grid_pos.shape and np.allclose(positions, grid_pos):
        out = np.minimum(mean_grad / norm, 1.0)
        out[empty_frac >= 1.0] = 0.0
        return out
    out = np.zeros(len(positions))
    mag = np.nan_to_num(mag, nan=0.0)
    for j, (pr, pc) in enumerate(positions):
        r0 = int(round(pr - half))
        c0 = int(round(pc - half))
        sl = (slice(max(r0, 0), r0 + patch_px), slice(max(c0, 0), c0 + patch_px))
        if not valid[sl].any():
            continue
        out[j] = min(float(mag[sl].mean()) / norm, 1.0)
    return out


def pool_descriptor(features: np.ndarray, weights: np.ndarray,
                    masks: np.ndarray) -> np.ndarray:
    """Weighted token mean, L2-normalized.

    Raises:
        NoSalientContent: all weight-mask products vanish (caller should skip
            the tile), or the pooled vector has zero norm.
    """
    f = np.asarray(features, dtype=float)
    wm = np.asarray(weights, dtype=float) * np.asarray(masks, dtype=float)
    if f.shape[0] != wm.shape[0]:
        raise ValueError("features, weights and masks must have equal length")
    total = wm.sum()
    if total <= 0.0:
        raise NoSalientContent("all pooling weights vanished")
    v = (wm @ f) / total
    n = np.linalg.norm(v)
    if n == 0.0:
        raise NoSalientContent("pooled feature is the zero vector")
    return v / n


@dataclass
class BuiltinEncoder:
    """Deterministic stand-in for a neural patch encoder."""

    spec: EncoderSpec = EncoderSpec()

    def tokens_for_region(self, intensity: IntensityGrid, submap_id: int,
                          iu0: int, iv0: int, nu: int, nv: int):
        region = assemble_dense(intensity.tiles, intensity.tile_px, iu0, iv0, nu, nv)
        positions, features = encode_builtin(region, self.spec.patch_px, self.spec.dim)
        return region, positions, features


@dataclass
class PrecomputedTokenEncoder:
    """Tokens produced offline, one DEMTOK1 file per (submap, tile).

    ``token_dir`` holds files named ``<tile_stem>.tok`` matching the tile PNG
    stems.  Tile-local token positions are offset into region coordinates.
    """

    spec: EncoderSpec
    token_dir: Path

    def tokens_for_region(self, intensity: IntensityGrid, submap_id: int,
                          iu0: int, iv0: int, nu: int, nv: int):
        from .demio import tile_stem
        region = assemble_dense(intensity.tiles, intensity.tile_px, iu0, iv0, nu, nv)
        tp = intensity.tile_px
        pos_list, feat_list = [], []
        for (iu, iv) in sorted(intensity.tiles):
            if not (iu0 <= iu < iu0 + nu and iv0 <= iv < iv0 + nv):
                continue
            path = Path(self.token_dir) / f"{tile_stem(submap_id, iu, iv)}.tok"
            if not path.exists():
                raise FormatError(f"missing token file {path}")
            positions, features, _ = load_precomputed_tokens(path, expected_dim=self.spec.dim)
            offset = np.array([(iv - iv0) * tp, (iu - iu0) * tp], dtype=float)
            pos_list.append(positions + offset)
            feat_list.append(features)
        if not pos_list:
            raise AllEmptyRegion("no tiles with tokens in region")
        return region, np.vstack(pos_list), np.vstack(feat_list)


def embed_region(region: np.ndarray, positions: np.ndarray,
                 features: np.ndarray, center: np.ndarray, sigma: float,
                 patch_px: int) -> np.ndarray:
    """Pool tokens of one assembled region into a unit descriptor."""
    if not np.any(~np.isnan(region)):
        raise AllEmptyRegion("region has no observed pixels")
    w = gaussian_weights(positions, center, sigma)
    m = visibility_mask(region, positions, patch_px)
    return pool_descriptor(features, w, m)


def embed_global_tile(intensity: IntensityGrid, tile_key: tuple[int, int],
                      encoder, submap_id: int, nbhd: int = 9,
                      sigma_tiles: float = 1.0) -> np.ndarray:
    """Descriptor of one global tile pooled over its nbhd x nbhd neighborhood.

    The neighborhood is clipped at the grid index borders; absent tiles enter
    as empty blocks and are down-weighted by the visibility mask.  The
    Gaussian is centered on the tile with sigma = one tile side.
    """
    iu, iv = tile_key
    if tile_key not in intensity.tiles:
        raise KeyError(f"tile {tile_key} not present")
    half = nbhd // 2
    iu0 = max(iu - half, 0)
    iv0 = max(iv - half, 0)
    iu1 = min(iu + half, intensity.n_u - 1)
    iv1 = min(iv + half, intensity.n_v - 1)
    nu, nv = iu1 - iu0 + 1, iv1 - iv0 + 1
    region, positions, features = encoder.tokens_for_region(
        intensity, submap_id, iu0, iv0, nu, nv)
    tp = intensity.tile_px
    center = np.array([((iv - iv0) + 0.5) * tp - 0.5, ((iu - iu0) + 0.5) * tp - 0.5])
    return embed_region(region, positions, features, center,
                        sigma_tiles * float(tp), encoder.spec.patch_px)


def embed_query_chip(intensity: IntensityGrid, chip_key: tuple[int, int],
                     encoder, submap_id: int,
                     sigma_tiles: float = 1.0) -> np.ndarray:
    """Descriptor of one query chip pooled over the entire submap region.

    Same weighting logic as :func:`embed_global_tile` but the pooling region
    is the bounding block of every present tile, with the Gaussian centered
    on the chip (sigma = one chip side).
    """
    return embed_query_chips(intensity, [chip_key], encoder, submap_id,
                             sigma_tiles)[chip_key]


def embed_query_chips(intensity: IntensityGrid, chip_keys, encoder,
                      submap_id: int, sigma_tiles: float = 1.0
                      ) -> dict[tuple[int, int], np.ndarray]:
    """Batch chip embedding: the region, tokens and masks are shared across
    all chips of one submap; only the Gaussian center varies per chip."""
    keys = list(intensity.tiles)
    if not keys:
        raise AllEmptyRegion("submap grid has no tiles")
    for ck in chip_keys:
        if ck not in intensity.tiles:
            raise KeyError(f"chip {ck} not present")
    iu0 = min(k[0] for k in keys)
    iu1 = max(k[0] for k in keys)
    iv0 = min(k[1] for k in keys)
    iv1 = max(k[1] for k in keys)
    region, positions, features = encoder.tokens_for_region(
        intensity, submap_id, iu0, iv0, iu1 - iu0 + 1, iv1 - iv0 + 1)
    if not np.any(~np.isnan(region)):
        raise AllEmptyRegion("region has no observed pixels")
    masks = visibility_mask(region, positions, encoder.spec.patch_px)
    tp = intensity.tile_px
    out = {}
    for iu, iv in chip_keys:
        center = np.array([((iv - iv0) + 0.5) * tp - 0.5,
                           ((iu - iu0) + 0.5) * tp - 0.5])
        w = gaussian_weights(positions, center, sigma_tiles * float(tp))
        out[(iu, iv)] = pool_descriptor(features, w, masks)
    return out


# -- id packing ---------------------------------------------------------------

_ID_BITS_IU = 20
_ID_BITS_IV = 20


def pack_tile_id(submap_id: int, iu: int, iv: int) -> int:
    """Composite (submap, tile) identity as one u64."""
    if not (0 <= submap_id < (1 << 24) and 0 <= iu < (1 << _ID_BITS_IU)
            and 0 <= iv < (1 << _ID_BITS_IV)):
        raise ValueError(f"id components out of range: {(submap_id, iu, iv)}")
    return (submap_id << (_ID_BITS_IU + _ID_BITS_IV)) | (iu << _ID_BITS_IV) | iv


def unpack_tile_id(packed: int) -> tuple[int, int, int]:
    iv = packed & ((1 << _ID_BITS_IV) - 1)
    iu = (packed >> _ID_BITS_IV) & ((1 << _ID_BITS_IU) - 1)
    submap_id = packed >> (_ID_BITS_IU + _ID_BITS_IV)
    return submap_id, iu, iv


# -- binary formats -----------------------------------------------------------

def save_tokens(path: str | Path, positions: np.ndarray, features: np.ndarray,
                patch_px: int) -> None:
    """DEMTOK1: magic, u32 count, u32 D, u32 patch_px, then per-token
    (f32 row, f32 col, D x f32), all little-endian."""
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float32)
    if features.shape[0] != positions.shape[0]:
        raise ValueError("positions and features must have equal length")
    n, dim = features.shape
    payload = np.hstack([positions, features]).astype("<f4")
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<III", n, dim, patch_px))
        f.write(payload.tobytes())


def load_precomputed_tokens(path: str | Path, expected_dim: int | None = None
                            ) -> tuple[np.ndarray, np.ndarray, int]:
    """Read a DEMTOK1 file.

    Returns:
        (positions (N, 2), features (N, D), patch_px)

    Raises:
        FormatError: wrong magic, truncated payload, or dimension mismatch.
    """
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad token file magic")
    n, dim, patch_px = struct.unpack("<III", data[8:20])
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: token dim {dim} != expected {expected_dim}")
    need = 20 + n * (2 + dim) * 4
    if len(data) != need:
        raise FormatError(f"{path}: payload length {len(data)} != expected {need}")
    raw = np.frombuffer(data, dtype="<f4", offset=20).reshape(n, 2 + dim)
    if not np.all(np.isfinite(raw)):
        raise FormatError(f"{path}: non-finite token payload")
    return raw[:, :2].astype(float), raw[:, 2:].astype(float), patch_px


def save_descriptors(path: str | Path, ids: np.ndarray, vectors: np.ndarray) -> None:
    """DEMDSC1: magic, u32 count, u32 D, then count x (u64 id, D x f32)."""
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
        raise ValueError("need one id per descriptor row")
    n, dim = vectors.shape
    with open(path, "wb") as f:
        f.write(DESC_MAGIC)
        f.write(struct.pack("<II", n, dim))
        for i in range(n):
            f.write(struct.pack("<Q", int(ids[i])))
            f.write(vectors[i].astype("<f4").tobytes())


def load_descriptors(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != DESC_MAGIC:
        raise FormatError(f"{path}: bad descriptor file magic")
    n, dim = struct.unpack("<II", data[8:16])
    rec = 8 + 4 * dim
    if len(data) != 16 + n * rec:
        raise FormatError(f"{path}: truncated descriptor payload")
    ids = np.empty(n, dtype=np.uint64)
    vecs = np.empty((n, dim), dtype=np.float32)
    pos = 16
    for i in range(n):
        (ids[i],) = struct.unpack("<Q", data[pos:pos + 8])
        vecs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 8)
        pos += rec
    return ids, vecs.astype(float)
