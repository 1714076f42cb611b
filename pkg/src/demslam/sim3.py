"""Sim(3) group arithmetic: exp/log maps, adjoints, and similarity alignment.

A similarity transform acts on points as ``p -> s * R @ p + t``.  Tangent
vectors are ordered ``xi = (rho[3], phi[3], sigma[1])`` with ``rho`` the
translation-like part, ``phi`` the rotation vector in radians and ``sigma``
the log of the scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchSingularity, DegenerateInput

_PI_GUARD = np.pi - 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula mapping a rotation vector to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-8:
        # second-order series keeps exp/log inverses exact to machine precision
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0.

    Shepperd's method: picks the numerically largest pivot so the conversion
    stays stable for rotations near pi.
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    q = np.empty(4)
    if t > 0.0:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q[0] = 0.5 * r
        q[1] = (R[2, 1] - R[1, 2]) * s
        q[2] = (R[0, 2] - R[2, 0]) * s
        q[3] = (R[1, 0] - R[0, 1]) * s
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        s = 0.5 / r
        q[0] = (R[k, j] - R[j, k]) * s
        q[i + 1] = 0.5 * r
        q[j + 1] = (R[j, i] + R[i, j]) * s
        q[k + 1] = (R[k, i] + R[i, k]) * s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R on the principal branch (angle < pi).

    Raises:
        BranchSingularity: if the rotation angle reaches pi, where the axis
            sign is ambiguous.
    """
    q = rot_to_quat(R)
    w = q[0]
    v = q[1:]
    n = np.linalg.norm(v)
    theta = 2.0 * np.arctan2(n, w)
    if theta >= _PI_GUARD:
        raise BranchSingularity(f"rotation angle {theta:.12f} at the pi branch cut")
    if n < 1e-9:
        # atan2(n, w)/n -> 1/w for small n
        return (2.0 / w) * v * (1.0 - n * n / (3.0 * w * w))
    return (theta / n) * v


@dataclass(frozen=True)
class Sim3:
    """Similarity transform with rotation R (3x3), translation t and scale s."""

    R: np.ndarray
    t: np.ndarray
    s: float

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "s", float(self.s))
        if self.s <= 0.0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(np.eye(3), np.zeros(3), 1.0)

    @staticmethod
    def from_quat(q_wxyz: np.ndarray, t: np.ndarray, s: float = 1.0) -> "Sim3":
        q = np.asarray(q_wxyz, dtype=float)
        out = Sim3(quat_to_rot(q), t, s)
        # cache the source quaternion so parse -> print round trips are
        # byte-stable (matrix <-> quaternion conversion drifts in the last ulp)
        object.__setattr__(out, "_quat_cache", q / np.linalg.norm(q))
        return out

    def quat(self) -> np.ndarray:
        """Rotation as unit quaternion (w, x, y, z)."""
        cached = getattr(self, "_quat_cache", None)
        if cached is not None:
            return cached
        return rot_to_quat(self.R)

    def act(self, p: np.ndarray) -> np.ndarray:
        """Apply to one point or an (N, 3) array of points."""
        p = np.asarray(p, dtype=float)
        return self.s * (p @ self.R.T) + self.t

    def compose(self, other: "Sim3") -> "Sim3":
        """self o other: apply `other` first, then `self`."""
        return Sim3(
            self.R @ other.R,
            self.s * (self.R @ other.t) + self.t,
            self.s * other.s,
        )

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return self.compose(other)

    def inverse(self) -> "Sim3":
        R_inv = self.R.T
        return Sim3(R_inv, -(R_inv @ self.t) / self.s, 1.0 / self.s)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form [[s*R, t], [0, 1]]."""
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Sim3":
        M = np.asarray(M, dtype=float)
        sR = M[:3, :3]
        s = float(np.cbrt(np.linalg.det(sR)))
        return Sim3(sR / s, M[:3, 3], s)

    def is_close(self, other: "Sim3", atol: float = 1e-9) -> bool:
        return (
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.t, other.t, atol=atol)
            and abs(self.s - other.s) <= atol
        )


def _calc_w(phi: np.ndarray, sigma: float) -> np.ndarray:
    """Translation mixing matrix of the Sim(3) exponential: t = W @ rho.

    Equals the convergent series sum_n (sigma*I + skew(phi))^n / (n+1)!.
    Closed forms are used where they are numerically stable; near sigma = 0
    they cancel catastrophically, so the series itself (which converges to
    machine precision in ~20 terms for our angle range) is summed instead.
    """
    theta = np.linalg.norm(phi)
    if abs(sigma) < 1e-3:
        M = sigma * np.eye(3) + skew(phi)
        W = np.eye(3)
        term = np.eye(3)
        for n in range(1, 60):
            term = term @ M / (n + 1.0)
            W += term
            if np.max(np.abs(term)) < 1e-18:
                break
        return W
    W = skew(phi)
    WW = W @ W
    scale = np.exp(sigma)
    C = (scale - 1.0) / sigma
    if theta < 1e-9:
        s2 = sigma * sigma
        A = ((sigma - 1.0) * scale + 1.0) / s2
        B = ((0.5 * s2 - sigma + 1.0) * scale - 1.0) / (s2 * sigma)
    else:
        a = scale * np.sin(theta)
        b = scale * np.cos(theta)
        c = theta * theta + sigma * sigma
        A = (a * sigma + (1.0 - b) * theta) / (theta * c)
        B = (C - ((b - 1.0) * sigma + a * theta) / c) / (theta * theta)
    return A * W + B * WW + C * np.eye(3)


def sim3_exp(xi: np.ndarray) -> Sim3:
    """Exponential map from a 7-vector (rho, phi, sigma) to a Sim3."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    rho, phi, sigma = xi[:3], xi[3:6], xi[6]
    return Sim3(so3_exp(phi), _calc_w(phi, sigma) @ rho, np.exp(sigma))


def sim3_log(T: Sim3) -> np.ndarray:
    """Log map to the 7-vector (rho, phi, sigma); principal rotation branch.

    Raises:
        BranchSingularity: if the rotation angle reaches pi.
    """
    sigma = np.log(T.s)
    phi = so3_log(T.R)
    rho = np.linalg.solve(_calc_w(phi, sigma), T.t)
    return np.concatenate([rho, phi, [sigma]])


def sim3_adjoint(T: Sim3) -> np.ndarray:
    """7x7 adjoint satisfying T * exp(xi) * T^-1 == exp(Adj(T) @ xi)."""
    A = np.zeros((7, 7))
    A[:3, :3] = T.s * T.R
    A[:3, 3:6] = skew(T.t) @ T.R
    A[:3, 6] = -T.t
    A[3:6, 3:6] = T.R
    A[6, 6] = 1.0
    return A


def sim3_ad(xi: np.ndarray) -> np.ndarray:
    """7x7 algebra adjoint: sim3_ad(a) @ b == bracket [a, b]."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    rho, phi, sigma = xi[:3], xi[3:6], xi[6]
    A = np.zeros((7, 7))
    A[:3, :3] = skew(phi) + sigma * np.eye(3)
    A[:3, 3:6] = skew(rho)
    A[:3, 6] = -rho
    A[3:6, 3:6] = skew(phi)
    return A


def sim3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(exp(xi) exp(d)) ~= xi + Jr_inv(xi) @ d.

    The right Jacobian Jr(xi) = sum_n (-ad xi)^n / (n+1)! is an entire series;
    it is summed to machine precision and inverted.
    """
    A = -sim3_ad(xi)
    J = np.eye(7)
    term = np.eye(7)
    for n in range(1, 40):
        term = term @ A / (n + 1.0)
        J += term
        if np.max(np.abs(term)) < 1e-18:
            break
    return np.linalg.inv(J)


def random_sim3(rng: np.random.Generator, max_angle: float = 3.0,
                max_trans: float = 10.0, max_log_scale: float = 0.5) -> Sim3:
    """Seeded random transform with rotation angle < max_angle."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_trans, max_trans, size=3)
    s = np.exp(rng.uniform(-max_log_scale, max_log_scale))
    return Sim3(so3_exp(angle * axis), t, s)


def umeyama_sim3(src: np.ndarray, dst: np.ndarray,
                 weights: np.ndarray | None = None,
                 with_scale: bool = True) -> Sim3:
    """Least-squares similarity (or rigid) alignment mapping src onto dst.

    Minimizes sum_k w_k * ||dst_k - (s R src_k + t)||^2 in closed form via the
    SVD of the weighted cross-covariance, with the determinant correction for
    the reflection case.

    Args:
        src: (N, 3) source points.
        dst: (N, 3) corresponding target points.
        weights: optional per-pair nonnegative weights.
        with_scale: solve for scale; otherwise fix s = 1 (rigid).

    Raises:
        DegenerateInput: fewer than 3 pairs, or source points collinear.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise DegenerateInput("need at least 3 point correspondences")
    if weights is None:
        w = np.full(src.shape[0], 1.0 / src.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape[0] != src.shape[0] or np.any(w < 0):
            raise DegenerateInput("weights must be nonnegative, one per pair")
        total = w.sum()
        if total <= 0:
            raise DegenerateInput("weights sum to zero")
        w = w / total

    mu_src = w @ src
    mu_dst = w @ dst
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = (dst_c * w[:, None]).T @ src_c

    U, d, Vt = np.linalg.svd(cov)
    # collinear sources leave the in-plane rotation unconstrained
    sv_src = np.linalg.svd(src_c * np.sqrt(w)[:, None], compute_uv=False)
    if sv_src[1] <= 1e-12 * max(sv_src[0], 1.0):
        raise DegenerateInput("source points are collinear")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_src = float(np.sum(w * np.sum(src_c * src_c, axis=1)))
        s = float(np.trace(np.diag(d) @ S)) / var_src
        if s <= 0:
            raise DegenerateInput("non-positive scale estimate")
    else:
        s = 1.0
    t = mu_dst - s * (R @ mu_src)
    return Sim3(R, t, s)
