import numpy as np
import pytest

from conftest import make_circle_graph
from demslam.errors import DisconnectedGraph, SingularSystem
from demslam.posegraph import (OptimizeReport, PoseGraph, PoseGraphEdge,
                               edge_information, edge_residual,
                               edge_residual_jacobians, load_pose_graph,
                               optimize_pose_graph, save_pose_graph)
from demslam.sim3 import Sim3, random_sim3, sim3_exp, umeyama_sim3


class TestResidual:
    def test_zero_for_consistent_edge(self, rng):
        t_i, t_j = random_sim3(rng), random_sim3(rng)
        t_hat = t_i.inverse() @ t_j
        assert np.allclose(edge_residual(t_i, t_j, t_hat), np.zeros(7), atol=1e-12)

    def test_translation_only_measurement(self):
        ident = Sim3.identity()
        t_hat = Sim3(np.eye(3), np.array([1.0, 0.0, 0.0]), 1.0)
        r = edge_residual(ident, ident, t_hat)
        assert np.allclose(r, [1, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_small_perturbation_magnitude(self, rng):
        # right-perturbing the measurement by exp(d) moves the residual by ~|d|
        t_i, t_j = random_sim3(rng, max_angle=1.5), random_sim3(rng, max_angle=1.5)
        t_hat = t_i.inverse() @ t_j
        d = rng.normal(size=7)
        d *= 1e-6 / np.linalg.norm(d)
        r = edge_residual(t_i, t_j, t_hat @ sim3_exp(d))
        assert abs(np.linalg.norm(r) - 1e-6) < 1e-8

    def test_jacobians_match_finite_differences(self, rng):
        h = 1e-6
        for _ in range(20):
            t_i = random_sim3(rng, max_angle=1.2, max_log_scale=0.3)
            t_j = random_sim3(rng, max_angle=1.2, max_log_scale=0.3)
            t_hat = (t_i.inverse() @ t_j) @ sim3_exp(rng.uniform(-0.2, 0.2, 7))
            r0, j_i, j_j = edge_residual_jacobians(t_i, t_j, t_hat)
            for jac, perturb in ((j_i, "i"), (j_j, "j")):
                fd = np.zeros((7, 7))
                for k in range(7):
                    d = np.zeros(7)
                    d[k] = h
                    if perturb == "i":
                        rp = edge_residual(t_i @ sim3_exp(d), t_j, t_hat)
                        rm = edge_residual(t_i @ sim3_exp(-d), t_j, t_hat)
                    else:
                        rp = edge_residual(t_i, t_j @ sim3_exp(d), t_hat)
                        rm = edge_residual(t_i, t_j @ sim3_exp(-d), t_hat)
                    fd[:, k] = (rp - rm) / (2 * h)
                rel = np.linalg.norm(fd - jac) / max(np.linalg.norm(jac), 1e-12)
                assert rel < 1e-5


class TestInformation:
    def test_monotone_in_rms(self):
        lo = edge_information(1.0, 0.9, 0.5)
        hi = edge_information(1.0, 0.9, 0.1)
        assert hi[0, 0] > lo[0, 0]

    def test_zero_confidence_floored(self):
        info = edge_information(1.0, 0.0, 0.1, kappa=100.0, eps=0.01)
        expected = 100.0 * 0.01 / (0.01 + 0.0001)
        assert np.isclose(info[0, 0], expected)

    def test_confidence_ratio(self):
        a = edge_information(1.0, 1.0, 0.1)
        b = edge_information(1.0, 0.5, 0.1)
        assert np.isclose(a[0, 0] / b[0, 0], 2.0)

    def test_spd(self):
        info = edge_information(0.0, 0.0, 5.0)
        assert np.all(np.linalg.eigvalsh(info) > 0)


class TestOptimize:
    def test_noise_free_chain_is_fixed_point(self, rng):
        graph = PoseGraph()
        poses = [Sim3.identity()]
        for k in range(5):
            poses.append(poses[-1] @ random_sim3(rng, max_angle=0.5))
        for k, p in enumerate(poses):
            graph.add_pose(k, p)
        for k in range(len(poses) - 1):
            rel = poses[k].inverse() @ poses[k + 1]
            graph.add_edge(PoseGraphEdge(k, k + 1, rel, np.eye(7)))
        opt, report = optimize_pose_graph(graph)
        assert report.iterations == 1
        assert report.final_cost < 1e-18
        for k, p in enumerate(poses):
            assert opt[k].is_close(p, atol=1e-12)

    def test_circle_drift_correction(self):
        graph, truth, est = make_circle_graph(seed=0)
        opt, report = optimize_pose_graph(graph, max_iters=50, tol=1e-8)
        gt_pos = np.array([p.t for p in truth])

        def ate(poses):
            pos = np.array([poses[k].t for k in range(len(truth))])
            align = umeyama_sim3(pos, gt_pos)
            return float(np.sqrt(np.mean(np.sum((gt_pos - align.act(pos))**2, axis=1))))

        pre = ate({k: p for k, p in enumerate(est)})
        post = ate(opt)
        assert post <= 0.10 * pre
        assert report.iterations <= 15

    def test_cost_non_increasing(self):
        graph, _, _ = make_circle_graph(seed=1)
        _, report = optimize_pose_graph(graph)
        costs = np.array(report.costs)
        assert np.all(np.diff(costs) <= 1e-12)

    def test_disconnected_raises(self):
        graph = PoseGraph()
        graph.add_pose(0, Sim3.identity())
        graph.add_pose(1, Sim3.identity())
        graph.add_pose(2, Sim3.identity())
        graph.add_edge(PoseGraphEdge(0, 1, Sim3.identity(), np.eye(7)))
        with pytest.raises(DisconnectedGraph):
            optimize_pose_graph(graph)

    def test_no_edges_raises(self):
        graph = PoseGraph()
        graph.add_pose(0, Sim3.identity())
        with pytest.raises(SingularSystem):
            optimize_pose_graph(graph)

    def test_gauge_invariance_of_residuals(self, rng):
        # left-multiplying every pose by a common world transform leaves the
        # cost unchanged
        graph, _, _ = make_circle_graph(seed=2)
        g = random_sim3(rng)
        base = [edge_residual(graph.poses[e.i], graph.poses[e.j], e.t_hat)
                for e in graph.edges]
        moved = [edge_residual(g @ graph.poses[e.i], g @ graph.poses[e.j], e.t_hat)
                 for e in graph.edges]
        for r0, r1 in zip(base, moved):
            assert np.allclose(r0, r1, atol=1e-9)


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        graph, _, _ = make_circle_graph(seed=3)
        path = tmp_path / "graph.json"
        save_pose_graph(graph, path)
        loaded = load_pose_graph(path)
        assert loaded.anchor == graph.anchor
        assert set(loaded.poses) == set(graph.poses)
        for k in graph.poses:
            assert loaded.poses[k].is_close(graph.poses[k], atol=1e-12)
        assert len(loaded.edges) == len(graph.edges)
        for a, b in zip(loaded.edges, graph.edges):
            assert (a.i, a.j, a.kind) == (b.i, b.j, b.kind)
            assert a.t_hat.is_close(b.t_hat, atol=1e-12)
            assert np.allclose(a.info, b.info)

    def test_full_information_matrix_round_trip(self, rng, tmp_path):
        graph = PoseGraph()
        graph.add_pose(0, Sim3.identity())
        graph.add_pose(1, random_sim3(rng))
        a = rng.normal(size=(7, 7))
        info = a @ a.T + 7 * np.eye(7)  # SPD, not diagonal
        graph.add_edge(PoseGraphEdge(0, 1, random_sim3(rng), info, "loop"))
        path = tmp_path / "g.json"
        save_pose_graph(graph, path)
        loaded = load_pose_graph(path)
        assert np.allclose(loaded.edges[0].info, info)

    def test_report_csv(self, tmp_path):
        rep = OptimizeReport(2, [3.0, 1.0], [0.5, 0.01], True)
        rep.write_csv(tmp_path / "report.csv")
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "iter,cost,max_step"
        assert len(lines) == 3
