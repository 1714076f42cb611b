"""Pose-graph optimization over Sim(3) with Gauss-Newton and gauge fixing.

The graph cost is the information-weighted squared norm of per-edge tangent
residuals ``r_ij = log(T_j^-1 T_i That_ij)``; the anchor pose is held fixed
to remove the global 7-dof ambiguity.  Updates are right-multiplicative:
``T <- T * exp(delta)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import DisconnectedGraph, SingularSystem
from .sim3 import Sim3, sim3_adjoint, sim3_exp, sim3_log, sim3_right_jacobian_inv

DENSE_SOLVER_MAX_POSES = 300


@dataclass
class PoseGraphEdge:
    """Relative Sim(3) constraint between two submaps.

    ``t_hat`` maps submap-j coordinates into submap-i coordinates and the
    7x7 information matrix must be symmetric positive definite.
    """

    i: int
    j: int
    t_hat: Sim3
    info: np.ndarray
    kind: str = "odom"  # "odom" or "loop"

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("edge endpoints must differ")
        self.info = np.asarray(self.info, dtype=float).reshape(7, 7)
        if self.kind not in ("odom", "loop"):
            raise ValueError(f"unknown edge kind {self.kind!r}")


@dataclass
class PoseGraph:
    """Poses (world <- submap) plus odometry and loop constraints."""

    poses: dict[int, Sim3] = field(default_factory=dict)
    edges: list[PoseGraphEdge] = field(default_factory=list)
    anchor: int | None = None

    def add_pose(self, node_id: int, pose: Sim3) -> None:
        if self.anchor is None:
            self.anchor = node_id
        self.poses[node_id] = pose

    def add_edge(self, edge: PoseGraphEdge) -> None:
        if edge.i not in self.poses or edge.j not in self.poses:
            raise KeyError(f"edge ({edge.i},{edge.j}) references unknown pose")
        self.edges.append(edge)

    def connected_from_anchor(self) -> bool:
        if self.anchor is None or self.anchor not in self.poses:
            return False
        adj: dict[int, set[int]] = {n: set() for n in self.poses}
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen = {self.anchor}
        stack = [self.anchor]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.poses)


def edge_residual(t_i: Sim3, t_j: Sim3, t_hat_ij: Sim3) -> np.ndarray:
    """Tangent residual log(T_j^-1 T_i That_ij); zero iff That = T_i^-1 T_j."""
    return sim3_log(t_j.inverse() @ t_i @ t_hat_ij)


def edge_residual_jacobians(
    t_i: Sim3, t_j: Sim3, t_hat_ij: Sim3
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its Jacobians w.r.t. right perturbations of T_i and T_j.

    With M = T_j^-1 T_i That and r = log(M):
      d r / d delta_i = Jr_inv(r) @ Adj(That^-1)
      d r / d delta_j = -Jr_inv(r) @ Adj(M^-1)
    """
    m = t_j.inverse() @ t_i @ t_hat_ij
    r = sim3_log(m)
    jr_inv = sim3_right_jacobian_inv(r)
    j_i = jr_inv @ sim3_adjoint(t_hat_ij.inverse())
    j_j = -jr_inv @ sim3_adjoint(m.inverse())
    return r, j_i, j_j


def edge_information(vote_score: float, rerank_score: float,
                     alignment_rms: float, kappa: float = 100.0,
                     eps: float = 0.01) -> np.ndarray:
    """Isotropic 7x7 information from retrieval confidence and fit quality.

    info = kappa * clamp(rerank_score, eps, 1) / (rms^2 + eps^2) * I; the
    clamp keeps the matrix SPD even for zero-confidence edges, and larger
    alignment residuals strictly decrease the weight.  ``vote_score`` is
    accepted for logging symmetry but does not enter the weight.
    """
    if alignment_rms < 0:
        raise ValueError("alignment_rms must be >= 0")
    conf = min(max(rerank_score, eps), 1.0)
    w = kappa * conf / (alignment_rms * alignment_rms + eps * eps)
    return w * np.eye(7)


@dataclass
class OptimizeReport:
    iterations: int
    costs: list[float]
    max_steps: list[float]
    converged: bool

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "cost", "max_step"])
            for it, (c, s) in enumerate(zip(self.costs, self.max_steps)):
                w.writerow([it, repr(c), repr(s)])


def _edge_cost(r: np.ndarray, info: np.ndarray, huber: float | None) -> tuple[float, float]:
    """Robustified cost and the IRLS weight for one edge."""
    e2 = float(r @ info @ r)
    if huber is None:
        return e2, 1.0
    e = np.sqrt(max(e2, 0.0))
    if e <= huber:
        return e2, 1.0
    return huber * (2.0 * e - huber), huber / e


def _total_cost(graph: PoseGraph, poses: dict[int, Sim3], huber: float | None) -> float:
    total = 0.0
    for e in graph.edges:
        r = edge_residual(poses[e.i], poses[e.j], e.t_hat)
        c, _ = _edge_cost(r, e.info, huber if e.kind == "loop" else None)
        total += c
    return total


def optimize_pose_graph(graph: PoseGraph, max_iters: int = 50,
                        tol: float = 1e-8,
                        huber: float | None = 1.0) -> tuple[dict[int, Sim3], OptimizeReport]:
    """Gauss-Newton over all non-anchor poses.

    The Huber kernel (whitened units) applies to loop edges only.  Steps that
    would increase the cost are halved up to 20 times; the cost sequence over
    accepted iterations is non-increasing.

    Returns:
        (optimized poses, report with per-iteration cost and step size)

    Raises:
        DisconnectedGraph: some pose is unreachable from the anchor.
        SingularSystem: the gauge-fixed normal equations cannot be solved.
    """
    if not graph.edges:
        raise SingularSystem("pose graph has no edges")
    if not graph.connected_from_anchor():
        raise DisconnectedGraph("pose graph is not connected from the anchor")

    poses = dict(graph.poses)
    free_ids = sorted(n for n in poses if n != graph.anchor)
    col = {n: 7 * k for k, n in enumerate(free_ids)}
    dim = 7 * len(free_ids)
    if dim == 0:
        cost = _total_cost(graph, poses, huber)
        return poses, OptimizeReport(0, [cost], [0.0], True)

    costs: list[float] = []
    max_steps: list[float] = []
    cost = _total_cost(graph, poses, huber)
    converged = False
    use_sparse = len(poses) > DENSE_SOLVER_MAX_POSES
    it = 0

    for it in range(1, max_iters + 1):
        if use_sparse:
            h_mat = scipy.sparse.lil_matrix((dim, dim))
        else:
            h_mat = np.zeros((dim, dim))
        b = np.zeros(dim)

        for e in graph.edges:
            r, j_i, j_j = edge_residual_jacobians(poses[e.i], poses[e.j], e.t_hat)
            _, w = _edge_cost(r, e.info, huber if e.kind == "loop" else None)
            info = w * e.info
            blocks = []
            if e.i != graph.anchor:
                blocks.append((col[e.i], j_i))
            if e.j != graph.anchor:
                blocks.append((col[e.j], j_j))
            for ca, ja in blocks:
                b[ca:ca + 7] += ja.T @ info @ r
                for cb, jb in blocks:
                    h_mat[ca:ca + 7, cb:cb + 7] += ja.T @ info @ jb

        try:
            if use_sparse:
                delta = scipy.sparse.linalg.spsolve(h_mat.tocsc(), -b)
            else:
                c_factor = scipy.linalg.cho_factor(h_mat)
                delta = scipy.linalg.cho_solve(c_factor, -b)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError, RuntimeError) as exc:
            raise SingularSystem(f"normal equations not solvable: {exc}") from exc
        if not np.all(np.isfinite(delta)):
            raise SingularSystem("normal equations produced non-finite step")

        step = float(np.max(np.abs(delta)))
        # step halving keeps the accepted cost sequence non-increasing
        scale = 1.0
        accepted = False
        for _ in range(20):
            trial = dict(poses)
            for n in free_ids:
                c0 = col[n]
                trial[n] = trial[n] @ sim3_exp(scale * delta[c0:c0 + 7])
            trial_cost = _total_cost(graph, trial, huber)
            if trial_cost <= cost + 1e-15:
                poses = trial
                cost = trial_cost
                accepted = True
                break
            scale *= 0.5
        costs.append(cost)
        max_steps.append(step * scale if accepted else 0.0)
        if not accepted or step < tol:
            converged = True
            break

    return poses, OptimizeReport(it, costs, max_steps, converged)


# -- serialization ----------------------------------------------------------

def _pose_to_json(pose: Sim3) -> dict:
    q = pose.quat()
    return {"q": [float(x) for x in q], "t": [float(x) for x in pose.t],
            "s": float(pose.s)}


def _pose_from_json(obj: dict) -> Sim3:
    return Sim3.from_quat(np.array(obj["q"]), np.array(obj["t"]), float(obj["s"]))


def save_pose_graph(graph: PoseGraph, path: str | Path) -> None:
    """JSON form: poses carry wxyz quaternions; edge info as diag or full."""
    edges = []
    for e in graph.edges:
        diag = np.diag(np.diag(e.info))
        info: list = (
            [float(x) for x in np.diag(e.info)]
            if np.allclose(e.info, diag)
            else [[float(x) for x in row] for row in e.info]
        )
        edges.append({"i": e.i, "j": e.j, "type": e.kind,
                      "T_hat": _pose_to_json(e.t_hat), "info": info})
    doc = {
        "anchor": graph.anchor,
        "poses": [dict(id=n, **_pose_to_json(p)) for n, p in sorted(graph.poses.items())],
        "edges": edges,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_pose_graph(path: str | Path) -> PoseGraph:
    doc = json.loads(Path(path).read_text())
    graph = PoseGraph(anchor=doc.get("anchor"))
    for p in doc["poses"]:
        graph.poses[int(p["id"])] = _pose_from_json(p)
    if graph.anchor is None and graph.poses:
        graph.anchor = min(graph.poses)
    for e in doc["edges"]:
        info = np.asarray(e["info"], dtype=float)
        if info.ndim == 1:
            info = np.diag(info)
        graph.edges.append(PoseGraphEdge(int(e["i"]), int(e["j"]),
                                         _pose_from_json(e["T_hat"]), info,
                                         e.get("type", "odom")))
    return graph
