"""Procedural desk-scale scenes: terrain, trajectories, drifting submaps.

The generator emits everything the pipeline ingests (submap manifest, PLY
clouds, ground-truth and odometry trajectories) plus a truth file with true
submap poses and footprint overlaps for retrieval scoring.  Revisiting
trajectory shapes (the figure-eight) guarantee genuinely covisible submap
pairs approached from opposite directions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UserInputError
from .geometry import PointCloud
from .sim3 import Sim3, sim3_exp, so3_exp
from .submaps import Submap, write_manifest, write_ply
from .evaluate import Trajectory, write_tum

DEFAULT_SCENE = {
    "name": "figure8-desk",
    "terrain": {"extent": 44.0, "n_bumps": 70, "amp": [0.4, 1.8],
                "sigma": [1.0, 3.0], "n_ridges": 40, "ridge_amp": [0.6, 2.2],
                "ridge_len": [3.0, 9.0], "ridge_width": [0.5, 1.2],
                "tilt": 0.012},
    # 1.8 laps: the first lap builds the gallery, the partial second lap
    # revisits it, so every late submap has a genuine covisible partner
    "trajectory": {"shape": "figure8", "a": 13.5, "b": 8.0, "height": 3.0,
                   "laps": 1.8},
    "submaps": {"count": 22, "frames_per": 6},
    "sampling": {"radius": 5.5, "spacing": 0.15},
    "noise": {"sigma_t": 0.05, "sigma_rot_deg": 0.5, "sigma_scale": 0.005,
              "iid_frac": 0.25},
    "stamp_dt": 0.5,
}


@dataclass
class Terrain:
    """Heightfield of seeded Gaussian bumps and oriented ridges over a tilt.

    Ridges are elongated Gaussians with per-ridge heading; their strong
    directional gradients give every region a distinctive orientation
    signature, which is what makes retrieval on synthetic scenes testable.
    """

    centers: np.ndarray
    amps: np.ndarray
    sigmas: np.ndarray
    ridge_centers: np.ndarray
    ridge_dirs: np.ndarray
    ridge_amps: np.ndarray
    ridge_lens: np.ndarray
    ridge_widths: np.ndarray
    tilt: float

    @classmethod
    def from_spec(cls, spec: dict, rng: np.random.Generator) -> "Terrain":
        extent = float(spec.get("extent", 40.0))
        n = int(spec.get("n_bumps", 80))
        amp_lo, amp_hi = spec.get("amp", [0.4, 1.8])
        sig_lo, sig_hi = spec.get("sigma", [1.0, 3.0])
        centers = rng.uniform(-extent / 2, extent / 2, size=(n, 2))
        amps = rng.uniform(amp_lo, amp_hi, size=n) * rng.choice([-1.0, 1.0], size=n)
        sigmas = rng.uniform(sig_lo, sig_hi, size=n)
        nr = int(spec.get("n_ridges", 0))
        r_amp = spec.get("ridge_amp", [0.6, 2.2])
        r_len = spec.get("ridge_len", [3.0, 9.0])
        r_wid = spec.get("ridge_width", [0.5, 1.2])
        r_centers = rng.uniform(-extent / 2, extent / 2, size=(nr, 2))
        headings = rng.uniform(0.0, np.pi, size=nr)
        r_dirs = np.column_stack([np.cos(headings), np.sin(headings)])
        r_amps = rng.uniform(r_amp[0], r_amp[1], size=nr)
        r_lens = rng.uniform(r_len[0], r_len[1], size=nr)
        r_widths = rng.uniform(r_wid[0], r_wid[1], size=nr)
        return cls(centers, amps, sigmas, r_centers, r_dirs, r_amps, r_lens,
                   r_widths, float(spec.get("tilt", 0.0)))

    def height(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        h = self.tilt * (xy[:, 0] + 0.5 * xy[:, 1])
        for c, a, s in zip(self.centers, self.amps, self.sigmas):
            d2 = np.sum((xy - c) ** 2, axis=1)
            h = h + a * np.exp(-d2 / (2.0 * s * s))
        for c, u, a, ln, w in zip(self.ridge_centers, self.ridge_dirs,
                                  self.ridge_amps, self.ridge_lens,
                                  self.ridge_widths):
            d = xy - c
            along = d @ u
            across = d[:, 0] * (-u[1]) + d[:, 1] * u[0]
            h = h + a * np.exp(-0.5 * (across / w) ** 2
                               - 0.5 * (along / ln) ** 2)
        return h


def _trajectory_xy(shape: str, a: float, b: float, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Planar path and (unnormalized) velocity at parameter t in [0, 2pi)."""
    if shape == "figure8":
        xy = np.column_stack([a * np.sin(t), b * np.sin(t) * np.cos(t)])
        vel = np.column_stack([a * np.cos(t), b * np.cos(2 * t)])
    elif shape == "circle":
        xy = np.column_stack([a * np.cos(t), a * np.sin(t)])
        vel = np.column_stack([-a * np.sin(t), a * np.cos(t)])
    else:
        raise UserInputError(f"unknown trajectory shape {shape!r}")
    return xy, vel


def _camera_pose(xy: np.ndarray, vel: np.ndarray, z: float) -> Sim3:
    yaw = math.atan2(vel[1], vel[0])
    # camera looks down at the terrain, heading along the path
    R = so3_exp(np.array([0.0, 0.0, yaw])) @ so3_exp(np.array([np.deg2rad(120.0), 0.0, 0.0]))
    return Sim3(R, np.array([xy[0], xy[1], z]), 1.0)


def _frame_samples(terrain: Terrain, center_xy: np.ndarray, radius: float,
                   spacing: float, rng: np.random.Generator) -> np.ndarray:
    """Jittered grid samples of the terrain inside a disc footprint."""
    k = int(radius / spacing)
    g = (np.arange(-k, k + 1)) * spacing
    gx, gy = np.meshgrid(g, g)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[np.sum(pts * pts, axis=1) <= radius * radius]
    pts = pts + rng.uniform(-spacing / 3, spacing / 3, size=pts.shape)
    xy = pts + center_xy
    return np.column_stack([xy, terrain.height(xy)])


@dataclass
class SyntheticScene:
    submaps: list[Submap]                 # drifted odometry world
    true_ref_poses: list[Sim3]            # ground-truth submap reference poses
    gt_traj: Trajectory
    odo_traj: Trajectory
    overlaps: np.ndarray                  # [i, j] = fraction of i's footprint covered by j
    scene: dict


def generate(scene: dict | None = None, seed: int = 0) -> SyntheticScene:
    """Build the scene in memory; see :func:`write_scene` for the disk form."""
    spec = dict(DEFAULT_SCENE)
    if scene:
        spec = {**DEFAULT_SCENE, **scene}
    rng_terrain = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    rng_samples = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([seed, 303]))

    terrain = Terrain.from_spec(spec["terrain"], rng_terrain)
    tshape = spec["trajectory"]
    n_sub = int(spec["submaps"]["count"])
    frames_per = int(spec["submaps"]["frames_per"])
    radius = float(spec["sampling"]["radius"])
    spacing = float(spec["sampling"]["spacing"])
    cam_h = float(tshape.get("height", 3.0))
    dt = float(spec.get("stamp_dt", 0.5))

    # one shared frame at each submap boundary (the transition frame)
    n_frames = n_sub * (frames_per - 1) + 1
    laps = float(tshape.get("laps", 1.0))
    t = np.linspace(0.0, 2.0 * np.pi * laps, n_frames, endpoint=False)
    xy, vel = _trajectory_xy(tshape.get("shape", "figure8"),
                             float(tshape.get("a", 16.0)),
                             float(tshape.get("b", 9.0)), t)
    z = terrain.height(xy) + cam_h
    true_frames = [_camera_pose(xy[i], vel[i], z[i]) for i in range(n_frames)]
    stamps = np.arange(n_frames) * dt

    # per-frame terrain samples in the true world
    frame_points = [
        _frame_samples(terrain, xy[i], radius, spacing, rng_samples)
        for i in range(n_frames)
    ]

    # submap k owns frames [k*(frames_per-1), ..., k*(frames_per-1)+frames_per-1],
    # sharing its first frame with the previous submap
    noise = spec["noise"]
    sig = np.concatenate([
        np.full(3, float(noise.get("sigma_t", 0.0))),
        np.full(3, np.deg2rad(float(noise.get("sigma_rot_deg", 0.0)))),
        [float(noise.get("sigma_scale", 0.0))],
    ])
    iid_frac = float(noise.get("iid_frac", 0.0))
    drift_bias = rng_noise.normal(0.0, 1.0, size=7) * sig

    true_refs: list[Sim3] = []
    odo_refs: list[Sim3] = []
    submaps: list[Submap] = []
    for k in range(n_sub):
        base = k * (frames_per - 1)
        idxs = list(range(base, min(base + frames_per, n_frames)))
        ref_true = true_frames[idxs[0]]
        true_refs.append(ref_true)
        if k == 0:
            odo_refs.append(ref_true)
        else:
            rel_true = true_refs[k - 1].inverse() @ ref_true
            delta = drift_bias.copy()
            if iid_frac > 0:
                delta = delta + iid_frac * rng_noise.normal(0.0, 1.0, size=7) * sig
            rel_meas = rel_true @ sim3_exp(delta)
            odo_refs.append(odo_refs[k - 1] @ rel_meas)
        warp = odo_refs[k] @ ref_true.inverse()  # true world -> drifted world

        pts = []
        fidx = []
        for local_f, fi in enumerate(idxs):
            p = warp.act(frame_points[fi])
            pts.append(p)
            fidx.append(np.full(len(p), local_f, dtype=np.int64))
        cloud = PointCloud(np.vstack(pts), frame_idx=np.concatenate(fidx))
        poses = [warp @ true_frames[fi] for fi in idxs]
        submaps.append(Submap(k, poses, stamps[idxs], cloud,
                              transition_frame=0 if k > 0 else None))

    # trajectories: frames keep their first-owner submap's pose version
    gt_traj = Trajectory(stamps, true_frames)
    odo_frames: list[Sim3] = []
    for fi in range(n_frames):
        k = min(fi // (frames_per - 1), n_sub - 1)
        warp = odo_refs[k] @ true_refs[k].inverse()
        odo_frames.append(warp @ true_frames[fi])
    odo_traj = Trajectory(stamps, odo_frames)

    overlaps = _footprint_overlaps(xy, n_sub, frames_per, radius)
    return SyntheticScene(submaps, true_refs, gt_traj, odo_traj, overlaps, spec)


def _footprint_overlaps(xy: np.ndarray, n_sub: int, frames_per: int,
                        radius: float, cell: float = 0.5) -> np.ndarray:
    """Ground-truth footprint overlap fractions on a coarse boolean grid."""
    lo = xy.min(axis=0) - radius
    cells: list[set[tuple[int, int]]] = []
    for k in range(n_sub):
        base = k * (frames_per - 1)
        idxs = range(base, min(base + frames_per, xy.shape[0]))
        covered: set[tuple[int, int]] = set()
        r_c = int(radius / cell)
        for fi in idxs:
            cx, cy = ((xy[fi] - lo) / cell).astype(int)
            for dx in range(-r_c, r_c + 1):
                for dy in range(-r_c, r_c + 1):
                    if dx * dx + dy * dy <= r_c * r_c:
                        covered.add((cx + dx, cy + dy))
        cells.append(covered)
    ov = np.zeros((n_sub, n_sub))
    for i in range(n_sub):
        for j in range(n_sub):
            if i != j and cells[i]:
                ov[i, j] = len(cells[i] & cells[j]) / len(cells[i])
    return ov


def true_covisible_sets(scene: SyntheticScene, min_overlap: float = 0.3,
                        exclusion_window: int = 2) -> dict[int, list[int]]:
    """Temporally distant submaps whose true footprints overlap the query's."""
    n = len(scene.submaps)
    out: dict[int, list[int]] = {}
    for q in range(n):
        partners = [
            j for j in range(n)
            if abs(j - q) > exclusion_window and scene.overlaps[q, j] >= min_overlap
        ]
        if partners:
            out[q] = sorted(partners, key=lambda j: -scene.overlaps[q, j])
    return out


def write_scene(scene: SyntheticScene, out_dir: str | Path) -> dict[str, Path]:
    """Persist manifest, clouds, trajectories, and the truth sidecar."""
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    cloud_files = {}
    for sm in scene.submaps:
        rel = f"clouds/submap_{sm.id:04d}.ply"
        write_ply(out_dir / rel, sm.cloud)
        cloud_files[sm.id] = rel
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, scene.submaps, cloud_files)
    gt = out_dir / "gt.tum"
    odom = out_dir / "odom.tum"
    write_tum(gt, scene.gt_traj)
    write_tum(odom, scene.odo_traj)
    truth = out_dir / "truth.json"
    truth.write_text(json.dumps({
        "overlaps": [[float(x) for x in row] for row in scene.overlaps],
        "scene": scene.scene,
    }, indent=1))
    return {"manifest": manifest, "gt": gt, "odom": odom, "truth": truth}


def load_scene_spec(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UserInputError(f"cannot read scene spec {path}: {exc}") from exc
