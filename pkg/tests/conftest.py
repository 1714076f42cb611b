import numpy as np
import pytest

from demslam.geometry import CanonicalFrame
from demslam.sim3 import Sim3, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_rotation(rng):
    def make(max_angle=3.0):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        return so3_exp(rng.uniform(0, max_angle) * axis)
    return make


@pytest.fixture
def identity_frame():
    return CanonicalFrame(np.eye(3), np.zeros(3))


def make_circle_graph(seed: int, n: int = 20, radius: float = 10.0):
    """Shared drift-correction fixture: a circle with systematic odometry
    drift (one tangent perturbation applied to every edge) plus one exact
    loop edge closing the ring."""
    from demslam.posegraph import PoseGraph, PoseGraphEdge
    from demslam.sim3 import sim3_exp

    rng = np.random.default_rng(seed)
    truth = []
    for k in range(n):
        a = 2 * np.pi * k / n
        t = np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        truth.append(Sim3(so3_exp(np.array([0, 0, a + np.pi / 2])), t, 1.0))
    sig = np.concatenate([np.full(3, 0.05), np.full(3, np.deg2rad(0.5)), [0.005]])
    drift = rng.normal(0.0, 1.0, size=7) * sig
    info_odo = np.diag(1.0 / sig**2)
    est = [truth[0]]
    for k in range(n - 1):
        rel = truth[k].inverse() @ truth[k + 1]
        est.append(est[-1] @ (rel @ sim3_exp(drift)))
    graph = PoseGraph()
    for k, p in enumerate(est):
        graph.add_pose(k, p)
    for k in range(n - 1):
        rel = truth[k].inverse() @ truth[k + 1]
        graph.add_edge(PoseGraphEdge(k, k + 1, rel @ sim3_exp(drift),
                                     info_odo, "odom"))
    loop = truth[n - 1].inverse() @ truth[0]
    graph.add_edge(PoseGraphEdge(n - 1, 0, loop, 1e6 * np.eye(7), "loop"))
    return graph, truth, est
