"""Trajectory association, alignment, and absolute trajectory error.

Readers/writers for the TUM text format (timestamp tx ty tz qx qy qz qw) and
the KITTI 12-float row-major 3x4 format.  Values print with 17 significant
digits so a write/read cycle is bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NoAssociation, UserInputError
from .sim3 import Sim3, umeyama_sim3


@dataclass
class Trajectory:
    """Timestamped poses (world <- camera); timestamps strictly increasing."""

    stamps: np.ndarray
    poses: list[Sim3]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if self.stamps.shape[0] != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if self.stamps.shape[0] == 0:
            raise ValueError("trajectory must contain at least one sample")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02
              ) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing with |dt| <= max_dt.

    Candidate pairs are taken best (smallest |dt|) first; each sample is used
    at most once.

    Returns:
        (est index, gt index) pairs sorted by est index.

    Raises:
        NoAssociation: no pair within the window.
    """
    cands = []
    for i, ts in enumerate(est.stamps):
        j = int(np.searchsorted(gt.stamps, ts))
        for jj in (j - 1, j, j + 1):
            if 0 <= jj < len(gt.stamps):
                dt = abs(ts - gt.stamps[jj])
                if dt <= max_dt:
                    cands.append((dt, i, jj))
    cands.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoAssociation(f"no timestamp pairs within {max_dt}s")
    pairs.sort()
    return pairs


def umeyama_align(est_positions: np.ndarray, gt_positions: np.ndarray,
                  with_scale: bool = True) -> Sim3:
    """Least-squares alignment mapping estimated onto ground-truth positions."""
    return umeyama_sim3(est_positions, gt_positions, with_scale=with_scale)


def ate_rmse(est_positions: np.ndarray, gt_positions: np.ndarray,
             alignment: Sim3) -> float:
    """Root mean squared positional error after applying the alignment."""
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if est.shape != gt.shape or est.shape[0] == 0:
        raise ValueError("need equal nonzero numbers of paired positions")
    resid = gt - alignment.act(est)
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


def evaluate_ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02,
                 with_scale: bool = True) -> dict:
    """Associate, align, and score; returns a small report dict."""
    pairs = associate(est, gt, max_dt)
    e = est.positions()[[i for i, _ in pairs]]
    g = gt.positions()[[j for _, j in pairs]]
    alignment = umeyama_align(e, g, with_scale=with_scale)
    return {
        "pairs": len(pairs),
        "ate_rmse": ate_rmse(e, g, alignment),
        "alignment": alignment,
        "align_mode": "sim3" if with_scale else "se3",
    }


# -- file formats -------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_tum(path: str | Path, traj: Trajectory) -> None:
    """TUM lines: timestamp tx ty tz qx qy qz qw (scale, if any, is dropped)."""
    lines = []
    for ts, pose in zip(traj.stamps, traj.poses):
        q = pose.quat()  # (w, x, y, z)
        vals = [ts, *pose.t, q[1], q[2], q[3], q[0]]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path: str | Path) -> Trajectory:
    stamps, poses = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise UserInputError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        stamps.append(ts)
        poses.append(Sim3.from_quat(np.array([qw, qx, qy, qz]),
                                    np.array([tx, ty, tz]), 1.0))
    if not stamps:
        raise UserInputError(f"{path}: no trajectory samples")
    return Trajectory(np.array(stamps), poses)


def write_kitti(path: str | Path, traj: Trajectory) -> None:
    """KITTI rows: the 3x4 [s*R | t] block, row-major, one pose per line.

    Folding the scale into the rotation block keeps the format round-trip
    exact for similarity poses; rigid poses write a plain [R | t].
    """
    lines = []
    for pose in traj.poses:
        block = getattr(pose, "_kitti_cache", None)
        if block is None:
            block = np.hstack([pose.s * pose.R, pose.t[:, None]])
        lines.append(" ".join(_fmt(v) for v in np.asarray(block).ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_kitti(path: str | Path) -> Trajectory:
    """Timestamps are frame indices; scale recovered from det of the 3x3.

    The parsed 3x4 block is cached on the pose so a rewrite reproduces the
    file byte for byte.
    """
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        vals = list(map(float, line.split()))
        if len(vals) != 12:
            raise UserInputError(f"{path}:{ln}: expected 12 fields, got {len(vals)}")
        m = np.array(vals).reshape(3, 4)
        s = float(np.cbrt(np.linalg.det(m[:, :3])))
        pose = Sim3(m[:, :3] / s, m[:, 3], s)
        object.__setattr__(pose, "_kitti_cache", m)
        poses.append(pose)
    if not poses:
        raise UserInputError(f"{path}: no trajectory samples")
    return Trajectory(np.arange(len(poses), dtype=float), poses)
