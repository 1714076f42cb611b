"""Point-cloud filtering, robust plane fitting, and the planar-canonical frame.

All functions are pure: inputs are never mutated, and RANSAC draws its full
sample schedule up front from the seed so results do not depend on evaluation
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InvalidBounds
from .sim3 import Sim3


@dataclass
class PointCloud:
    """Points as an (N, 3) float array plus optional per-point attributes.

    ``confidence`` is carried through filtering but unused by default;
    ``frame_idx`` tags each point with the camera frame it was reconstructed
    from, which the ingest stage needs to apply camera-relative range bounds.
    """

    points: np.ndarray
    confidence: np.ndarray | None = None
    frame_idx: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
            if self.confidence.shape[0] != len(self):
                raise ValueError("confidence must have one entry per point")
        if self.frame_idx is not None:
            self.frame_idx = np.asarray(self.frame_idx, dtype=np.int64).reshape(-1)
            if self.frame_idx.shape[0] != len(self):
                raise ValueError("frame_idx must have one entry per point")

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, mask: np.ndarray) -> "PointCloud":
        """Subset by boolean mask or index array, attributes in lockstep."""
        return PointCloud(
            self.points[mask],
            None if self.confidence is None else self.confidence[mask],
            None if self.frame_idx is None else self.frame_idx[mask],
        )


@dataclass(frozen=True)
class PlaneModel:
    """Plane n.p + d = 0 with unit normal and a deterministic sign."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Signed point-plane distances n.p + d."""
        return np.asarray(points).reshape(-1, 3) @ self.normal + self.offset


@dataclass(frozen=True)
class CanonicalFrame:
    """Plane-aligned orthonormal frame; column 3 of R is the plane normal."""

    R: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("frame rotation must be orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("frame rotation must be proper (det = +1)")


def _fix_normal_sign(n: np.ndarray) -> np.ndarray:
    """Deterministic sign: positive z component, then y, then x."""
    for axis in (2, 1, 0):
        if n[axis] != 0.0:
            return n if n[axis] > 0 else -n
    raise ValueError("zero normal")


def depth_filter(cloud: PointCloud, d_min: float, d_max: float) -> tuple[PointCloud, np.ndarray]:
    """Keep points whose range satisfies d_min <= ||p|| <= d_max.

    The cloud must be expressed in the frame the bound applies to (the camera
    frame at capture).  Order is preserved and attribute arrays are filtered
    in lockstep.

    Returns:
        (filtered cloud, boolean keep mask over the input)

    Raises:
        InvalidBounds: if not 0 <= d_min < d_max.
    """
    if not (0.0 <= d_min < d_max):
        raise InvalidBounds(f"need 0 <= d_min < d_max, got [{d_min}, {d_max}]")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=bool)
    r = np.linalg.norm(cloud.points, axis=1)
    keep = (r >= d_min) & (r <= d_max)
    return cloud.select(keep), keep


def depth_filter_camera_relative(
    cloud: PointCloud, frame_poses: list[Sim3], d_min: float, d_max: float
) -> tuple[PointCloud, np.ndarray]:
    """Range filter for world-frame clouds, per source camera.

    Points carrying a ``frame_idx`` tag are filtered on their range in that
    camera's frame (the inverse pose maps world points back through scale).
    Untagged points fall back to the distance to the nearest camera center.

    Raises:
        InvalidBounds: if not 0 <= d_min < d_max.
    """
    if not (0.0 <= d_min < d_max):
        raise InvalidBounds(f"need 0 <= d_min < d_max, got [{d_min}, {d_max}]")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=bool)
    if cloud.frame_idx is not None and frame_poses:
        r = np.empty(len(cloud))
        idx = np.clip(cloud.frame_idx, 0, len(frame_poses) - 1)
        for f in np.unique(idx):
            sel = idx == f
            local = frame_poses[int(f)].inverse().act(cloud.points[sel])
            r[sel] = np.linalg.norm(local, axis=1)
    elif frame_poses:
        centers = np.array([p.t for p in frame_poses])
        d2 = (
            np.sum(cloud.points**2, axis=1)[:, None]
            - 2.0 * cloud.points @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        r = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    else:
        r = np.linalg.norm(cloud.points, axis=1)
    keep = (r >= d_min) & (r <= d_max)
    return cloud.select(keep), keep


def refine_plane_svd(inliers: PointCloud | np.ndarray,
                     weights: np.ndarray | None = None) -> PlaneModel:
    """Total-least-squares plane: smallest singular vector of centered points.

    Raises:
        DegenerateInput: fewer than 3 points or (near-)collinear input.
    """
    pts = inliers.points if isinstance(inliers, PointCloud) else np.asarray(inliers, dtype=float)
    pts = pts.reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateInput("plane fit needs at least 3 points")
    if weights is None:
        centroid = pts.mean(axis=0)
        centered = pts - centroid
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        centroid = w @ pts
        centered = (pts - centroid) * np.sqrt(w)[:, None]
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateInput("points are collinear; plane is not unique")
    n = _fix_normal_sign(vt[2])
    return PlaneModel(n, -float(n @ centroid))


def fit_plane_ransac(cloud: PointCloud, iterations: int = 500,
                     inlier_thresh: float = 0.05, seed: int = 0,
                     use_confidence: bool = False) -> tuple[PlaneModel, np.ndarray]:
    """RANSAC plane hypothesis search followed by an SVD refit on the winners.

    Triples are proposed from a seeded generator with the full sample schedule
    drawn up front, so the result is deterministic for a fixed seed regardless
    of how iterations are evaluated.  Hypotheses are scored by inlier count
    (or by total confidence when ``use_confidence`` is set); the best
    hypothesis' inliers are refit with :func:`refine_plane_svd` and the
    returned mask is evaluated against the refined plane.

    Raises:
        DegenerateInput: fewer than 3 points, or every sampled triple collinear.
    """
    n_pts = len(cloud)
    if n_pts < 3:
        raise DegenerateInput("RANSAC needs at least 3 points")
    pts = cloud.points
    conf = cloud.confidence if (use_confidence and cloud.confidence is not None) else None

    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n_pts, size=(iterations, 3))

    best_score = -1.0
    best_mask: np.ndarray | None = None
    for tri in samples:
        if len(set(tri.tolist())) < 3:
            continue
        a, b, c = pts[tri]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = -float(n @ a)
        dist = np.abs(pts @ n + d)
        mask = dist <= inlier_thresh
        score = float(conf[mask].sum()) if conf is not None else float(mask.sum())
        if score > best_score:
            best_score = score
            best_mask = mask

    if best_mask is None or best_mask.sum() < 3:
        raise DegenerateInput("no non-collinear triple produced a valid plane")

    w = conf[best_mask] if conf is not None else None
    try:
        plane = refine_plane_svd(pts[best_mask], weights=w)
    except DegenerateInput:
        raise
    inlier_mask = np.abs(plane.distances(pts)) <= inlier_thresh
    return plane, inlier_mask


def build_canonical_frame(plane: PlaneModel, inliers: PointCloud | np.ndarray,
                          weights: np.ndarray | None = None) -> CanonicalFrame:
    """Orthonormal frame with z = plane normal and x = dominant in-plane axis.

    The in-plane x axis is the leading eigenvector of the covariance of the
    inliers projected into the plane; its sign is fixed to have positive dot
    with world +x (ties broken by +y, then +z).  The origin is the inlier
    centroid.

    Raises:
        DegenerateInput: fewer than 2 inliers or no in-plane spread.
    """
    pts = inliers.points if isinstance(inliers, PointCloud) else np.asarray(inliers, dtype=float)
    pts = pts.reshape(-1, 3)
    if pts.shape[0] < 2:
        raise DegenerateInput("canonical frame needs at least 2 inliers")
    n = plane.normal
    if weights is None:
        w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    origin = w @ pts
    centered = pts - origin
    projected = centered - np.outer(centered @ n, n)
    cov = (projected * w[:, None]).T @ projected
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] <= 1e-24:
        raise DegenerateInput("inliers have no in-plane spread")
    x_axis = eigvecs[:, -1]
    x_axis = x_axis - (x_axis @ n) * n  # guard against numeric drift off-plane
    x_axis = x_axis / np.linalg.norm(x_axis)
    for axis in (0, 1, 2):
        if abs(x_axis[axis]) > 1e-12:
            if x_axis[axis] < 0:
                x_axis = -x_axis
            break
    y_axis = np.cross(n, x_axis)
    R = np.column_stack([x_axis, y_axis, n])
    return CanonicalFrame(R, origin)


def to_plane_coords(frame: CanonicalFrame, p: np.ndarray) -> np.ndarray:
    """World point(s) to (u, v, h) in the canonical frame."""
    p = np.asarray(p, dtype=float)
    return (p - frame.origin) @ frame.R


def from_plane_coords(frame: CanonicalFrame, uvh: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_plane_coords`."""
    uvh = np.asarray(uvh, dtype=float)
    return uvh @ frame.R.T + frame.origin
