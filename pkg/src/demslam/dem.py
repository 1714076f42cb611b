"""Tiled 2.5D height rasterization with a globally fixed meters-per-pixel.

Grids are sparse maps from tile indices to fixed-size pixel blocks; empty
cells are NaN in memory and carry a zero hit count.  All grids sharing one
session use the same bounds anchor and resolution so tiles from different
submaps are spatially commensurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .errors import (EmptyGrid, EmptyInput, InvalidTemperature, OutOfBounds,
                     ZeroExtent)
from .geometry import CanonicalFrame

REDUCERS = ("mean", "max", "softmax")


@dataclass(frozen=True)
class DemParams:
    """Rasterization and rendering knobs.

    Defaults follow the ablation study: softmax reducer at tau = 0.02 and
    edge shading alpha = 0.95.  ``target_px_long`` is the pixel count of the
    longer planar span; full-scale dense reconstructions run at 90 000, the
    4096 default here suits desk-scale work.
    """

    target_px_long: int = 4096
    tile_px: int = 256
    reducer: str = "softmax"
    tau: float = 0.02
    norm_percentiles: tuple[float, float] = (0.5, 99.5)
    alpha_edge: float = 0.95

    def __post_init__(self):
        if self.reducer not in REDUCERS:
            raise ValueError(f"reducer must be one of {REDUCERS}")
        if not (self.target_px_long >= self.tile_px >= 1):
            raise ValueError("need target_px_long >= tile_px >= 1")
        p_lo, p_hi = self.norm_percentiles
        if not (0.0 <= p_lo < p_hi <= 100.0):
            raise ValueError("need 0 <= p_lo < p_hi <= 100")
        if self.reducer == "softmax" and self.tau <= 0:
            raise InvalidTemperature("softmax temperature must be > 0")
        if not (0.0 <= self.alpha_edge <= 1.0):
            raise ValueError("alpha_edge must be in [0, 1]")


@dataclass
class DemTile:
    """One tile: heights are NaN exactly where hit_count is zero."""

    iu: int
    iv: int
    height: np.ndarray
    hit_count: np.ndarray

    def valid_mask(self) -> np.ndarray:
        return self.hit_count > 0


@dataclass
class DemGrid:
    """Sparse tiled height field over fixed planar bounds.

    ``tiles`` maps (I_u, I_v) to :class:`DemTile`; arrays are indexed
    [y, x] with x along u and y along v.
    """

    bounds: tuple[float, float, float, float]
    mpp: float
    tile_px: int
    target_px_long: int
    tiles: dict[tuple[int, int], DemTile] = field(default_factory=dict)
    frame: CanonicalFrame | None = None
    rejected_points: int = 0

    @property
    def w_px(self) -> int:
        u0, u1, _, _ = self.bounds
        return max(1, math.ceil((u1 - u0) / self.mpp - 1e-12))

    @property
    def h_px(self) -> int:
        _, _, v0, v1 = self.bounds
        return max(1, math.ceil((v1 - v0) / self.mpp - 1e-12))

    @property
    def n_u(self) -> int:
        return math.ceil(self.w_px / self.tile_px)

    @property
    def n_v(self) -> int:
        return math.ceil(self.h_px / self.tile_px)

    def valid_heights(self) -> np.ndarray:
        """All observed heights, tile order by sorted index."""
        vals = [t.height[t.valid_mask()] for _, t in sorted(self.tiles.items())]
        return np.concatenate(vals) if vals else np.zeros(0)

    def total_hits(self) -> int:
        return int(sum(t.hit_count.sum() for t in self.tiles.values()))

    def tile_center_uv(self, iu: int, iv: int) -> tuple[float, float]:
        u0, _, v0, _ = self.bounds
        half = 0.5 * self.tile_px * self.mpp
        return (u0 + iu * self.tile_px * self.mpp + half,
                v0 + iv * self.tile_px * self.mpp + half)


def compute_bounds(points_uvh: np.ndarray) -> tuple[float, float, float, float]:
    """Planar bounding box (u0, u1, v0, v1) of projected points.

    Raises:
        EmptyInput: no points.
    """
    pts = np.asarray(points_uvh, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyInput("cannot bound an empty point set")
    return (float(pts[:, 0].min()), float(pts[:, 0].max()),
            float(pts[:, 1].min()), float(pts[:, 1].max()))


def compute_mpp(bounds: tuple[float, float, float, float], target_px_long: int) -> float:
    """Global resolution: longer span divided by the target pixel count.

    Raises:
        ZeroExtent: both spans are zero.
    """
    u0, u1, v0, v1 = bounds
    span = max(u1 - u0, v1 - v0)
    if span <= 0.0:
        raise ZeroExtent("bounding box has no planar extent")
    return span / float(target_px_long)


def _bin_arrays(u: np.ndarray, v: np.ndarray, bounds, mpp: float, tile_px: int,
                n_u: int, n_v: int):
    """Vectorized tile/pixel binning; the scalar op wraps this."""
    u0, _, v0, _ = bounds
    x_hat = (u - u0) / mpp
    y_hat = (v - v0) / mpp
    iu = np.minimum(np.floor(x_hat / tile_px).astype(np.int64), n_u - 1)
    iv = np.minimum(np.floor(y_hat / tile_px).astype(np.int64), n_v - 1)
    x = np.clip(np.round(x_hat - iu * tile_px).astype(np.int64), 0, tile_px - 1)
    y = np.clip(np.round(y_hat - iv * tile_px).astype(np.int64), 0, tile_px - 1)
    return iu, iv, x, y


def bin_point(u: float, v: float, bounds, mpp: float, tile_px: int) -> tuple[int, int, int, int]:
    """Tile indices and within-tile pixel for one planar point.

    Pixels land at round((u - u0)/mpp - I_u * tile_px) and are clipped into
    [0, tile_px - 1]; a point exactly on the far bound falls into the last
    valid pixel of the last tile.

    Raises:
        OutOfBounds: point outside the grid bounds.
    """
    u0, u1, v0, v1 = bounds
    if not (u0 <= u <= u1 and v0 <= v <= v1):
        raise OutOfBounds(f"({u}, {v}) outside bounds {bounds}")
    w_px = max(1, math.ceil((u1 - u0) / mpp - 1e-12))
    h_px = max(1, math.ceil((v1 - v0) / mpp - 1e-12))
    n_u = math.ceil(w_px / tile_px)
    n_v = math.ceil(h_px / tile_px)
    iu, iv, x, y = _bin_arrays(np.array([u]), np.array([v]), bounds, mpp,
                               tile_px, n_u, n_v)
    return int(iu[0]), int(iv[0]), int(x[0]), int(y[0])


def reduce_heights(heights: np.ndarray, reducer: str, tau: float = 0.02) -> float:
    """Collapse a non-empty height bucket to one value.

    softmax uses exp(h/tau) weights with a max shift for overflow safety;
    tau -> 0 approaches the max, tau -> inf the mean.

    Raises:
        EmptyInput: empty bucket (empty cells are never reduced).
        InvalidTemperature: softmax with tau <= 0.
    """
    h = np.asarray(heights, dtype=float).reshape(-1)
    if h.size == 0:
        raise EmptyInput("cannot reduce an empty height bucket")
    if reducer == "mean":
        return float(np.mean(h))
    if reducer == "max":
        return float(np.max(h))
    if reducer == "softmax":
        if tau <= 0:
            raise InvalidTemperature(f"softmax temperature must be > 0, got {tau}")
        w = np.exp((h - h.max()) / tau)
        return float((w @ h) / w.sum())
    raise ValueError(f"unknown reducer {reducer!r}")


def rasterize(points_uvh: np.ndarray, params: DemParams, bounds,
              mpp: float, frame: CanonicalFrame | None = None) -> DemGrid:
    """Bin plane-aligned points into tiles and reduce per-pixel buckets.

    Points outside the bounds are counted in ``rejected_points`` and skipped
    (incremental global maps may receive stragglers).  Hit counts sum to the
    number of in-bounds points.
    """
    pts = np.asarray(points_uvh, dtype=float).reshape(-1, 3)
    grid = DemGrid(bounds=tuple(float(b) for b in bounds), mpp=float(mpp),
                   tile_px=params.tile_px, target_px_long=params.target_px_long,
                   frame=frame)
    if pts.shape[0] == 0:
        return grid
    u0, u1, v0, v1 = grid.bounds
    inb = ((pts[:, 0] >= u0) & (pts[:, 0] <= u1)
           & (pts[:, 1] >= v0) & (pts[:, 1] <= v1))
    grid.rejected_points = int((~inb).sum())
    pts = pts[inb]
    if pts.shape[0] == 0:
        return grid

    tile_px = params.tile_px
    iu, iv, x, y = _bin_arrays(pts[:, 0], pts[:, 1], grid.bounds, grid.mpp,
                               tile_px, grid.n_u, grid.n_v)
    key = ((iu * grid.n_v + iv) * tile_px + y) * tile_px + x
    order = np.argsort(key, kind="stable")  # stable: bucket keeps input order
    key_s = key[order]
    h_s = pts[order, 2]
    starts = np.flatnonzero(np.concatenate([[True], key_s[1:] != key_s[:-1]]))
    counts = np.diff(np.concatenate([starts, [key_s.size]]))

    if params.reducer == "mean":
        vals = np.add.reduceat(h_s, starts) / counts
    elif params.reducer == "max":
        vals = np.maximum.reduceat(h_s, starts)
    else:
        seg_max = np.repeat(np.maximum.reduceat(h_s, starts), counts)
        w = np.exp((h_s - seg_max) / params.tau)
        vals = np.add.reduceat(w * h_s, starts) / np.add.reduceat(w, starts)

    bucket_key = key_s[starts]
    b_x = bucket_key % tile_px
    b_y = (bucket_key // tile_px) % tile_px
    b_iv = (bucket_key // (tile_px * tile_px)) % grid.n_v
    b_iu = bucket_key // (tile_px * tile_px * grid.n_v)

    tile_key = b_iu * grid.n_v + b_iv
    t_order = np.argsort(tile_key, kind="stable")
    t_starts = np.flatnonzero(np.concatenate(
        [[True], tile_key[t_order][1:] != tile_key[t_order][:-1]]))
    t_bounds = np.concatenate([t_starts, [tile_key.size]])
    for k in range(len(t_starts)):
        sel = t_order[t_bounds[k]:t_bounds[k + 1]]
        tiu, tiv = int(b_iu[sel[0]]), int(b_iv[sel[0]])
        height = np.full((tile_px, tile_px), np.nan)
        hits = np.zeros((tile_px, tile_px), dtype=np.int64)
        height[b_y[sel], b_x[sel]] = vals[sel]
        hits[b_y[sel], b_x[sel]] = counts[sel]
        grid.tiles[(tiu, tiv)] = DemTile(tiu, tiv, height, hits)
    return grid


# -- post-processing --------------------------------------------------------

def _fill_nearest(arr: np.ndarray) -> np.ndarray:
    """Replace NaN cells by their nearest observed value (EDT lookup).

    Keeps hole borders gradient-free so empty cells never manufacture edges;
    an all-NaN array is returned unchanged.
    """
    invalid = np.isnan(arr)
    if not invalid.any():
        return arr
    if invalid.all():
        return arr
    idx = scipy.ndimage.distance_transform_edt(invalid, return_distances=False,
                                               return_indices=True)
    return arr[tuple(idx)]


def sobel_magnitude(arr: np.ndarray) -> np.ndarray:
    """Gradient magnitude with 3x3 Sobel kernels; NaNs filled, not smeared.

    Cells that are NaN in the input are NaN in the output.
    """
    filled = _fill_nearest(arr)
    if np.isnan(filled).all():
        return np.full_like(arr, np.nan)
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    gx = scipy.ndimage.convolve(filled, kx, mode="nearest")
    gy = scipy.ndimage.convolve(filled, kx.T, mode="nearest")
    mag = np.sqrt(gx * gx + gy * gy)
    mag[np.isnan(arr)] = np.nan
    return mag


def normalize_array(heights: np.ndarray, h_min: float, h_max: float) -> np.ndarray:
    """Clip-and-scale heights into [0, 1]; NaN preserved; degenerate -> 0."""
    if h_max <= h_min:
        out = np.zeros_like(heights)
        out[np.isnan(heights)] = np.nan
        return out
    return (np.clip(heights, h_min, h_max) - h_min) / (h_max - h_min)


def grid_percentiles(grid: DemGrid, p_lo: float, p_hi: float) -> tuple[float, float]:
    """Global height percentiles over all observed cells (not per tile).

    Raises:
        EmptyGrid: no observed cells anywhere.
    """
    vals = grid.valid_heights()
    if vals.size == 0:
        raise EmptyGrid("grid has no observed cells")
    h_min, h_max = np.percentile(vals, [p_lo, p_hi])
    return float(h_min), float(h_max)


@dataclass
class IntensityGrid:
    """Sparse [0, 1] raster mirroring a DemGrid's tile layout (NaN = empty)."""

    bounds: tuple[float, float, float, float]
    mpp: float
    tile_px: int
    tiles: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def n_u(self) -> int:
        u0, u1 = self.bounds[0], self.bounds[1]
        w_px = max(1, math.ceil((u1 - u0) / self.mpp - 1e-12))
        return math.ceil(w_px / self.tile_px)

    @property
    def n_v(self) -> int:
        v0, v1 = self.bounds[2], self.bounds[3]
        h_px = max(1, math.ceil((v1 - v0) / self.mpp - 1e-12))
        return math.ceil(h_px / self.tile_px)


def normalize_grid(grid: DemGrid, p_lo: float = 0.5, p_hi: float = 99.5,
                   limits: tuple[float, float] | None = None) -> IntensityGrid:
    """Percentile-normalize all observed heights into [0, 1].

    Percentiles are computed once over the whole grid; pass ``limits`` to
    reuse a previously computed (h_min, h_max) pair instead.

    Raises:
        EmptyGrid: no observed cells.
    """
    h_min, h_max = limits if limits is not None else grid_percentiles(grid, p_lo, p_hi)
    out = IntensityGrid(grid.bounds, grid.mpp, grid.tile_px)
    for key, tile in grid.tiles.items():
        out.tiles[key] = normalize_array(tile.height, h_min, h_max)
    return out


def assemble_dense(tiles: dict[tuple[int, int], np.ndarray], tile_px: int,
                   iu0: int, iv0: int, nu: int, nv: int) -> np.ndarray:
    """Materialize a rectangular block of tiles into one dense array.

    Absent tiles become NaN blocks.  Output shape is (nv*tile_px, nu*tile_px),
    indexed [y, x].
    """
    out = np.full((nv * tile_px, nu * tile_px), np.nan)
    for (iu, iv), arr in tiles.items():
        if iu0 <= iu < iu0 + nu and iv0 <= iv < iv0 + nv:
            y0 = (iv - iv0) * tile_px
            x0 = (iu - iu0) * tile_px
            out[y0:y0 + tile_px, x0:x0 + tile_px] = arr
    return out


def edge_enhance(i0: np.ndarray, alpha_edge: float,
                 grad_p99: float | None = None) -> np.ndarray:
    """Darken high-gradient cells: I = I0 * (1 - alpha * clip01(|grad|/p99)).

    alpha_edge = 0 returns the input unchanged; NaN cells stay NaN.  The
    gradient normalizer is this raster's own 99th percentile unless given.
    """
    if not (0.0 <= alpha_edge <= 1.0):
        raise ValueError("alpha_edge must be in [0, 1]")
    i0 = np.asarray(i0, dtype=float)
    if alpha_edge == 0.0:
        return i0.copy()
    valid = ~np.isnan(i0)
    if not valid.any():
        return i0.copy()
    mag = sobel_magnitude(i0)
    if grad_p99 is None:
        grad_p99 = float(np.percentile(mag[valid], 99.0))
    if grad_p99 <= 0.0:
        return i0.copy()
    mask = 1.0 - alpha_edge * np.clip(mag / grad_p99, 0.0, 1.0)
    out = i0 * mask
    out[~valid] = np.nan
    return out


def edge_enhance_grid(grid: IntensityGrid, alpha_edge: float) -> IntensityGrid:
    """Grid-level edge shading with per-tile halos and one global normalizer.

    Each tile is re-convolved with a one-pixel halo from its neighbors so the
    mask is seamless across tile borders; the 99th-percentile normalizer is
    shared by the whole grid.
    """
    out = IntensityGrid(grid.bounds, grid.mpp, grid.tile_px)
    if alpha_edge == 0.0 or not grid.tiles:
        out.tiles = {k: v.copy() for k, v in grid.tiles.items()}
        return out
    tp = grid.tile_px
    mags = {}
    all_vals = []
    for (iu, iv), arr in grid.tiles.items():
        region = assemble_dense(grid.tiles, tp, iu - 1, iv - 1, 3, 3)
        mag = sobel_magnitude(region)[tp:2 * tp, tp:2 * tp]
        mags[(iu, iv)] = mag
        v = mag[~np.isnan(arr)]
        if v.size:
            all_vals.append(v)
    if not all_vals:
        out.tiles = {k: v.copy() for k, v in grid.tiles.items()}
        return out
    p99 = float(np.percentile(np.concatenate(all_vals), 99.0))
    for key, arr in grid.tiles.items():
        if p99 <= 0.0:
            out.tiles[key] = arr.copy()
            continue
        mask = 1.0 - alpha_edge * np.clip(mags[key] / p99, 0.0, 1.0)
        shaded = arr * mask
        shaded[np.isnan(arr)] = np.nan
        out.tiles[key] = shaded
    return out


def hillshade(height: np.ndarray, mpp: float,
              light_dir: np.ndarray = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Lambertian shading from central-difference surface normals.

    Returns values in [0, 1]; NaN cells stay NaN.  ``light_dir`` must be a
    unit vector expressed in (u, v, up) coordinates.
    """
    ell = np.asarray(light_dir, dtype=float).reshape(3)
    if abs(np.linalg.norm(ell) - 1.0) > 1e-6:
        raise ValueError("light direction must be a unit vector")
    h = np.asarray(height, dtype=float)
    filled = _fill_nearest(h)
    if np.isnan(filled).all():
        return np.full_like(h, np.nan)
    dz_dy, dz_dx = np.gradient(filled, mpp)
    norm = np.sqrt(dz_dx ** 2 + dz_dy ** 2 + 1.0)
    shade = np.maximum(0.0, (-dz_dx * ell[0] - dz_dy * ell[1] + ell[2]) / norm)
    shade[np.isnan(h)] = np.nan
    return shade


def hillshade_grid(grid: DemGrid, light_dir=(0.0, 0.0, 1.0)) -> IntensityGrid:
    """Per-tile hillshade with one-pixel halos for seamless normals."""
    out = IntensityGrid(grid.bounds, grid.mpp, grid.tile_px)
    tp = grid.tile_px
    heights = {k: t.height for k, t in grid.tiles.items()}
    for (iu, iv) in grid.tiles:
        region = assemble_dense(heights, tp, iu - 1, iv - 1, 3, 3)
        out.tiles[(iu, iv)] = hillshade(region, grid.mpp, light_dir)[tp:2 * tp, tp:2 * tp]
    return out
