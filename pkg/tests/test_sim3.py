import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from demslam.errors import BranchSingularity, DegenerateInput
from demslam.sim3 import (Sim3, quat_to_rot, random_sim3, rot_to_quat, sim3_ad,
                          sim3_adjoint, sim3_exp, sim3_log,
                          sim3_right_jacobian_inv, skew, so3_exp, so3_log,
                          umeyama_sim3)


def sim3_hat(xi):
    """Independent 4x4 algebra embedding for the expm oracle."""
    rho, phi, sigma = xi[:3], xi[3:6], xi[6]
    h = np.zeros((4, 4))
    h[:3, :3] = skew(phi) + sigma * np.eye(3)
    h[:3, 3] = rho
    return h


class TestExpLog:
    def test_log_identity_is_zero(self):
        assert np.allclose(sim3_log(Sim3.identity()), np.zeros(7))

    def test_exp_zero_is_identity(self):
        assert sim3_exp(np.zeros(7)).is_close(Sim3.identity())

    def test_pure_scale(self):
        T = Sim3(np.eye(3), np.zeros(3), np.e)
        xi = sim3_log(T)
        assert np.allclose(xi, [0, 0, 0, 0, 0, 0, 1.0], atol=1e-12)

    def test_exp_matches_matrix_exponential(self, rng):
        # oracle: expm of the 4x4 hat embedding
        for _ in range(200):
            xi = np.concatenate([rng.uniform(-5, 5, 3),
                                 rng.uniform(-1, 1, 3) * rng.uniform(0, 1.5),
                                 [rng.uniform(-0.7, 0.7)]])
            expected = scipy.linalg.expm(sim3_hat(xi))
            assert np.allclose(sim3_exp(xi).matrix(), expected, atol=1e-10)

    def test_round_trip(self, rng):
        for _ in range(500):
            T = random_sim3(rng)
            assert T.is_close(sim3_exp(sim3_log(T)), atol=1e-10)

    def test_log_at_pi_raises(self):
        T = Sim3(so3_exp(np.array([np.pi, 0, 0])), np.zeros(3), 1.0)
        with pytest.raises(BranchSingularity):
            sim3_log(T)

    def test_round_trip_near_pi(self):
        xi = np.zeros(7)
        xi[3] = np.pi - 1e-3
        assert np.allclose(sim3_log(sim3_exp(xi)), xi, atol=1e-9)


class TestGroupOps:
    def test_compose_inverse_is_identity(self, rng):
        for _ in range(50):
            T = random_sim3(rng)
            assert (T @ T.inverse()).is_close(Sim3.identity(), atol=1e-12)

    def test_act_pure_scale(self):
        T = Sim3(np.eye(3), np.zeros(3), 2.0)
        assert np.allclose(T.act(np.array([1.0, 1.0, 1.0])), [2, 2, 2])

    def test_compose_action_associativity(self, rng):
        for _ in range(50):
            A, B = random_sim3(rng), random_sim3(rng)
            p = rng.uniform(-5, 5, 3)
            assert np.allclose((A @ B).act(p), A.act(B.act(p)), atol=1e-9)

    def test_matrix_round_trip(self, rng):
        T = random_sim3(rng)
        assert Sim3.from_matrix(T.matrix()).is_close(T, atol=1e-12)

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            Sim3(np.eye(3), np.zeros(3), 0.0)


class TestQuaternions:
    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_rot_quat_round_trip(self, seed):
        r = np.random.default_rng(seed)
        axis = r.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = so3_exp(r.uniform(0, np.pi - 1e-6) * axis)
        assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)

    def test_quat_w_nonnegative(self, rng):
        for _ in range(20):
            T = random_sim3(rng)
            assert rot_to_quat(T.R)[0] >= 0


class TestAdjoints:
    def test_adjoint_identity(self, rng):
        for _ in range(30):
            T = random_sim3(rng, max_angle=2.0)
            xi = rng.uniform(-0.3, 0.3, 7)
            lhs = (T @ sim3_exp(xi) @ T.inverse()).matrix()
            rhs = sim3_exp(sim3_adjoint(T) @ xi).matrix()
            assert np.allclose(lhs, rhs, atol=1e-9)

    def test_ad_is_adjoint_derivative(self, rng):
        h = 1e-6
        for _ in range(20):
            xi = rng.uniform(-1, 1, 7)
            fd = (sim3_adjoint(sim3_exp(h * xi))
                  - sim3_adjoint(sim3_exp(-h * xi))) / (2 * h)
            assert np.allclose(fd, sim3_ad(xi), atol=1e-8)

    def test_right_jacobian_inverse_vs_fd(self, rng):
        for _ in range(20):
            xi = rng.uniform(-0.8, 0.8, 7)
            J = sim3_right_jacobian_inv(xi)
            for k in range(7):
                d = np.zeros(7)
                d[k] = 1e-6
                col = (sim3_log(sim3_exp(xi) @ sim3_exp(d))
                       - sim3_log(sim3_exp(xi) @ sim3_exp(-d))) / 2e-6
                assert np.allclose(col, J[:, k], atol=1e-7)


class TestUmeyama:
    def test_identity_when_equal(self, rng):
        pts = rng.uniform(-3, 3, (12, 3))
        assert umeyama_sim3(pts, pts).is_close(Sim3.identity(), atol=1e-10)

    def test_known_transform_recovery(self, rng):
        src = rng.uniform(-5, 5, (10, 3))
        T = Sim3(so3_exp(np.array([0.0, 0.0, np.pi / 2])),
                 np.array([1.0, 0.0, 0.0]), 2.0)
        est = umeyama_sim3(src, T.act(src))
        assert est.is_close(T, atol=1e-9)

    def test_exactly_invertible(self, rng):
        src = rng.uniform(-5, 5, (15, 3))
        T = random_sim3(rng, max_angle=2.0)
        dst = T.act(src)
        fwd = umeyama_sim3(src, dst)
        bwd = umeyama_sim3(dst, src)
        assert bwd.is_close(fwd.inverse(), atol=1e-9)

    def test_collinear_raises(self):
        src = np.outer(np.arange(5.0), np.array([1.0, 1.0, 0.0]))
        with pytest.raises(DegenerateInput):
            umeyama_sim3(src, src + 1.0)

    def test_too_few_points(self):
        with pytest.raises(DegenerateInput):
            umeyama_sim3(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rigid_mode_keeps_unit_scale(self, rng):
        src = rng.uniform(-5, 5, (10, 3))
        T = Sim3(so3_exp(np.array([0.1, 0.2, 0.3])), np.array([1.0, 2.0, 3.0]), 1.0)
        est = umeyama_sim3(src, T.act(src), with_scale=False)
        assert est.s == 1.0
        assert est.is_close(T, atol=1e-9)

    def test_reflection_corrected(self, rng):
        # mirrored targets must still yield a proper rotation
        src = rng.uniform(-2, 2, (20, 3))
        dst = src.copy()
        dst[:, 2] *= -1
        est = umeyama_sim3(src, dst)
        assert np.isclose(np.linalg.det(est.R), 1.0, atol=1e-9)


def test_so3_log_small_angle():
    phi = np.array([1e-10, -2e-10, 3e-11])
    assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-15)
