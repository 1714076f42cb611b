"""Submaps and their on-disk forms: binary PLY / CSV clouds, JSON manifests.

A submap bundles ordered frame poses (world <- camera, Sim(3)) with a dense
world-frame point cloud and the index of the transition frame it shares with
its predecessor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UserInputError
from .geometry import PointCloud
from .sim3 import Sim3


@dataclass
class Submap:
    """Unit of mapping: poses + filtered cloud + odometry link."""

    id: int
    frame_poses: list[Sim3]
    frame_stamps: np.ndarray
    cloud: PointCloud
    transition_frame: int | None = None

    def __post_init__(self):
        if not self.frame_poses:
            raise ValueError("submap needs at least one frame pose")
        self.frame_stamps = np.asarray(self.frame_stamps, dtype=float).reshape(-1)
        if self.frame_stamps.shape[0] != len(self.frame_poses):
            raise ValueError("one timestamp per frame pose required")
        if self.transition_frame is not None and not (
                0 <= self.transition_frame < len(self.frame_poses)):
            raise ValueError(f"transition_frame {self.transition_frame} out of range")

    @property
    def reference_pose(self) -> Sim3:
        """Pose-graph node for this submap: its first frame pose."""
        return self.frame_poses[0]


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    """Binary little-endian PLY with x/y/z float32 and optional extras."""
    n = len(cloud)
    props = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.confidence is not None:
        props.append(("confidence", "<f4"))
    if cloud.frame_idx is not None:
        props.append(("frame_idx", "<u4"))
    table = np.zeros(n, dtype=np.dtype(props))
    table["x"], table["y"], table["z"] = cloud.points.T.astype(np.float32)
    if cloud.confidence is not None:
        table["confidence"] = cloud.confidence.astype(np.float32)
    if cloud.frame_idx is not None:
        table["frame_idx"] = cloud.frame_idx.astype(np.uint32)
    ply_type = {"<f4": "float", "<u4": "uint"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type[dt]} {name}" for name, dt in props]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii")
                           + table.tobytes())


def read_ply(path: str | Path) -> PointCloud:
    """Read a binary little-endian PLY with float32 x/y/z.

    Optional ``confidence`` (float) and ``frame_idx`` (uint/int) properties
    are picked up; other properties are skipped.
    """
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise UserInputError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    n = None
    fields: list[tuple[str, str, int]] = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property" and n is not None:
            if parts[1] == "list":
                raise UserInputError(f"{path}: list properties unsupported")
            if parts[1] not in _PLY_TYPES:
                raise UserInputError(f"{path}: unsupported property type {parts[1]}")
            dt, size = _PLY_TYPES[parts[1]]
            fields.append((parts[2], dt, size))
    if not fmt_ok:
        raise UserInputError(f"{path}: only binary_little_endian PLY supported")
    if n is None:
        raise UserInputError(f"{path}: missing vertex element")
    stride = sum(s for _, _, s in fields)
    if len(body) < n * stride:
        raise UserInputError(f"{path}: truncated vertex data")
    names = [f[0] for f in fields]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise UserInputError(f"{path}: missing property {axis}")
    rec = np.dtype([(name, dt) for name, dt, _ in fields])
    table = np.frombuffer(body, dtype=rec, count=n)
    pts = np.column_stack([table["x"], table["y"], table["z"]]).astype(float)
    conf = table["confidence"].astype(float) if "confidence" in names else None
    fidx = table["frame_idx"].astype(np.int64) if "frame_idx" in names else None
    if n == 0:
        return PointCloud(np.zeros((0, 3)),
                          np.zeros(0) if conf is not None else None,
                          np.zeros(0, dtype=np.int64) if fidx is not None else None)
    return PointCloud(pts, conf, fidx)


def read_cloud_csv(path: str | Path) -> PointCloud:
    """CSV fallback: one ``x,y,z[,conf[,frame_idx]]`` row per point.

    All rows must carry the same number of columns.
    """
    pts, conf, fidx = [], [], []
    width = None
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if width is None:
            width = len(parts)
            if width not in (3, 4, 5):
                raise UserInputError(f"{path}:{ln}: expected 3-5 columns")
        elif len(parts) != width:
            raise UserInputError(
                f"{path}:{ln}: inconsistent column count "
                f"({len(parts)} vs {width})")
        pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
        if width >= 4:
            conf.append(float(parts[3]))
        if width >= 5:
            fidx.append(int(float(parts[4])))
    return PointCloud(np.array(pts).reshape(-1, 3),
                      np.array(conf) if conf else None,
                      np.array(fidx, dtype=np.int64) if fidx else None)


def read_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise UserInputError(f"cloud file not found: {path}")
    if path.suffix.lower() == ".csv":
        return read_cloud_csv(path)
    return read_ply(path)


# -- manifest -----------------------------------------------------------------

def _pose_to_json(pose: Sim3) -> dict:
    q = pose.quat()  # (w, x, y, z); stored xyzw to mirror the TUM field order
    return {"q_xyzw": [float(q[1]), float(q[2]), float(q[3]), float(q[0])],
            "t": [float(x) for x in pose.t], "s": float(pose.s)}


def _pose_from_json(obj: dict) -> Sim3:
    x, y, z, w = obj["q_xyzw"]
    return Sim3.from_quat(np.array([w, x, y, z]), np.array(obj["t"]),
                          float(obj.get("s", 1.0)))


def write_manifest(path: str | Path, submaps: list[Submap],
                   cloud_files: dict[int, str]) -> None:
    doc = {"submaps": []}
    for sm in submaps:
        doc["submaps"].append({
            "id": sm.id,
            "cloud": cloud_files[sm.id],
            "transition_frame": sm.transition_frame,
            "frames": [
                dict(stamp=float(ts), **_pose_to_json(p))
                for ts, p in zip(sm.frame_stamps, sm.frame_poses)
            ],
        })
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest(path: str | Path, load_clouds: bool = True) -> list[Submap]:
    """Parse a submap manifest; cloud paths resolve relative to the manifest.

    Raises:
        UserInputError: malformed manifest, duplicate ids, missing files.
    """
    path = Path(path)
    if not path.exists():
        raise UserInputError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UserInputError(f"{path}: invalid JSON ({exc})") from exc
    if "submaps" not in doc:
        raise UserInputError(f"{path}: missing 'submaps' key")
    out: list[Submap] = []
    seen: set[int] = set()
    for item in doc["submaps"]:
        sid = int(item["id"])
        if sid in seen:
            raise UserInputError(f"{path}: duplicate submap id {sid}")
        seen.add(sid)
        frames = item.get("frames", [])
        if not frames:
            raise UserInputError(f"{path}: submap {sid} has no frames")
        poses = [_pose_from_json(fr) for fr in frames]
        stamps = np.array([float(fr["stamp"]) for fr in frames])
        if load_clouds:
            cloud = read_cloud(path.parent / item["cloud"])
        else:
            cloud = PointCloud(np.zeros((0, 3)))
        out.append(Submap(sid, poses, stamps, cloud,
                          item.get("transition_frame")))
    out.sort(key=lambda s: s.id)
    return out
