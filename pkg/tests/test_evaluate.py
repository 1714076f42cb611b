import numpy as np
import pytest

from demslam.errors import NoAssociation, UserInputError
from demslam.evaluate import (Trajectory, associate, ate_rmse, evaluate_ate,
                              read_kitti, read_tum, umeyama_align, write_kitti,
                              write_tum)
from demslam.sim3 import Sim3, random_sim3, so3_exp


def traj_from_positions(positions, stamps=None):
    positions = np.asarray(positions, dtype=float)
    if stamps is None:
        stamps = np.arange(len(positions), dtype=float)
    poses = [Sim3(np.eye(3), p, 1.0) for p in positions]
    return Trajectory(np.asarray(stamps, dtype=float), poses)


class TestTrajectory:
    def test_requires_increasing_stamps(self):
        with pytest.raises(ValueError):
            traj_from_positions(np.zeros((3, 3)), stamps=[0.0, 0.0, 1.0])

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros(0), [])


class TestAssociate:
    def test_identical_stamps_full_pairing(self, rng):
        a = traj_from_positions(rng.uniform(-1, 1, (10, 3)))
        b = traj_from_positions(rng.uniform(-1, 1, (10, 3)))
        pairs = associate(a, b, 0.02)
        assert pairs == [(i, i) for i in range(10)]

    def test_offset_beyond_window_fails(self, rng):
        a = traj_from_positions(rng.uniform(-1, 1, (5, 3)))
        b = traj_from_positions(rng.uniform(-1, 1, (5, 3)),
                                stamps=np.arange(5) + 0.021)
        with pytest.raises(NoAssociation):
            associate(a, b, 0.02)

    def test_interleaved_hand_case(self):
        # oracle: best-|dt|-first greedy over a 6-sample interleaving
        est = traj_from_positions(np.zeros((3, 3)), stamps=[0.0, 1.0, 2.0])
        gt = traj_from_positions(np.zeros((3, 3)), stamps=[0.015, 0.99, 2.5])
        pairs = associate(est, gt, max_dt=0.02)
        assert pairs == [(0, 0), (1, 1)]

    def test_each_sample_used_once(self):
        est = traj_from_positions(np.zeros((2, 3)), stamps=[0.0, 0.01])
        gt = traj_from_positions(np.zeros((1, 3)), stamps=[0.005])
        pairs = associate(est, gt, max_dt=0.02)
        assert len(pairs) == 1 and pairs[0][1] == 0


class TestAlign:
    def test_identity(self, rng):
        p = rng.uniform(-5, 5, (10, 3))
        assert umeyama_align(p, p).is_close(Sim3.identity(), atol=1e-10)

    def test_translation_recovered(self, rng):
        p = rng.uniform(-5, 5, (10, 3))
        align = umeyama_align(p, p + np.array([1.0, 0, 0]))
        assert np.allclose(align.t, [1, 0, 0], atol=1e-9)

    def test_scale_recovered(self, rng):
        gt = rng.uniform(-5, 5, (12, 3))
        R = so3_exp(np.array([0, 0, np.deg2rad(30)]))
        est = 0.5 * (gt @ R.T)
        align = umeyama_align(est, gt, with_scale=True)
        assert np.isclose(align.s, 2.0, atol=1e-9)
        assert np.allclose(align.act(est), gt, atol=1e-9)


class TestAteRmse:
    def test_zero_for_identical(self, rng):
        p = rng.uniform(-5, 5, (8, 3))
        assert ate_rmse(p, p, Sim3.identity()) == 0.0

    def test_hand_case_half_meter(self):
        est = np.zeros((4, 3))
        gt = np.zeros((4, 3))
        gt[0, 0] = 1.0
        assert ate_rmse(est, gt, Sim3.identity()) == 0.5

    def test_offset_absorbed_by_alignment(self, rng):
        gt = rng.uniform(-5, 5, (10, 3))
        est = gt + np.array([2.0, -1.0, 0.5])
        align = umeyama_align(est, gt, with_scale=False)
        assert ate_rmse(est, gt, align) < 1e-9

    def test_alignment_never_hurts(self, rng):
        gt = rng.uniform(-5, 5, (15, 3))
        est = gt + rng.normal(0, 0.3, (15, 3))
        aligned = ate_rmse(est, gt, umeyama_align(est, gt))
        identity = ate_rmse(est, gt, Sim3.identity())
        assert aligned <= identity + 1e-12

    def test_invariant_under_common_rigid_motion(self, rng):
        gt = traj_from_positions(rng.uniform(-5, 5, (12, 3)))
        est = traj_from_positions(gt.positions() + rng.normal(0, 0.2, (12, 3)))
        base = evaluate_ate(est, gt)["ate_rmse"]
        g = random_sim3(rng, max_angle=2.0, max_log_scale=0.0)
        gt2 = Trajectory(gt.stamps, [g @ p for p in gt.poses])
        est2 = Trajectory(est.stamps, [g @ p for p in est.poses])
        moved = evaluate_ate(est2, gt2)["ate_rmse"]
        assert np.isclose(base, moved, atol=1e-9)


class TestTumFormat:
    def test_round_trip_bit_stable(self, rng, tmp_path):
        poses = [random_sim3(rng, max_log_scale=0.0) for _ in range(7)]
        poses = [Sim3(p.R, p.t, 1.0) for p in poses]
        traj = Trajectory(np.arange(7) * 0.1, poses)
        path = tmp_path / "traj.tum"
        write_tum(path, traj)
        first = path.read_bytes()
        loaded = read_tum(path)
        write_tum(path, loaded)
        assert path.read_bytes() == first

    def test_values_preserved(self, rng, tmp_path):
        traj = traj_from_positions(rng.uniform(-10, 10, (5, 3)))
        path = tmp_path / "t.tum"
        write_tum(path, traj)
        loaded = read_tum(path)
        assert np.allclose(loaded.positions(), traj.positions(), atol=1e-15)
        assert np.array_equal(loaded.stamps, traj.stamps)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.tum"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(UserInputError):
            read_tum(path)

    def test_comments_skipped(self, tmp_path):
        path = tmp_path / "c.tum"
        path.write_text("# header\n0.0 1 2 3 0 0 0 1\n")
        assert len(read_tum(path)) == 1


class TestKittiFormat:
    def test_round_trip_bit_stable(self, rng, tmp_path):
        poses = [random_sim3(rng, max_log_scale=0.3) for _ in range(6)]
        traj = Trajectory(np.arange(6, dtype=float), poses)
        path = tmp_path / "poses.txt"
        write_kitti(path, traj)
        first = path.read_bytes()
        loaded = read_kitti(path)
        write_kitti(path, loaded)
        assert path.read_bytes() == first

    def test_scale_recovered_from_det(self, rng, tmp_path):
        pose = Sim3(so3_exp(np.array([0.1, 0.2, 0.3])), np.ones(3), 1.7)
        traj = Trajectory(np.array([0.0]), [pose])
        path = tmp_path / "p.txt"
        write_kitti(path, traj)
        loaded = read_kitti(path)
        assert loaded.poses[0].is_close(pose, atol=1e-12)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(UserInputError):
            read_kitti(path)
