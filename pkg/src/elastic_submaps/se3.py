"""Rigid-body transforms on SE(3).

Conventions used throughout the package:

* A pose ``T_AB`` maps points expressed in frame B into frame A:
  ``p_A = R_AB @ p_B + t_AB``.
* Tangent vectors are ordered ``[rotation (rad); translation (m)]``.
* Perturbations are applied on the right, ``T = T_mean @ exp(xi)``.
* Rotations are stored as unit quaternions ``(w, x, y, z)``; rotation
  matrices are built on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6
BRANCH_MARGIN = 1e-6


class BranchAmbiguityError(ValueError):
    """Raised when log() is asked for a rotation at or near pi."""


def skew(v) -> np.ndarray:
    """3x3 matrix such that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _normalized(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    # already-unit input is kept bit-for-bit so serialisation round trips exactly
    if abs(n - 1.0) > 4 * np.finfo(float).eps:
        q = q / n
    # canonical hemisphere keeps equality checks and serialisation stable
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _normalized(np.array(q))


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Immutable rigid transform: unit quaternion (w, x, y, z) + translation."""

    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        if np.linalg.norm(q) == 0.0:
            raise ValueError("zero quaternion")
        q = _normalized(q)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> PoseSE3:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> PoseSE3:
        return cls(matrix_to_quat(R), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        w = min(abs(float(self.quaternion[0])), 1.0)
        return 2.0 * math.atan2(float(np.linalg.norm(self.quaternion[1:])), w)

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.quaternion)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"PoseSE3(q=[{q}], t=[{t}])"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return PoseSE3(_quat_mul(a.quaternion, b.quaternion), a.apply(b.translation))


def inverse(a: PoseSE3) -> PoseSE3:
    q_inv = a.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
    R_inv = quat_to_matrix(q_inv)
    return PoseSE3(q_inv, -R_inv @ a.translation)


def between(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``inverse(a) @ b``."""
    return compose(inverse(a), b)


def left_jacobian_so3(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return (np.eye(3) + (1.0 - math.cos(theta)) / t2 * W
            + (theta - math.sin(theta)) / (t2 * theta) * W @ W)


def left_jacobian_so3_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coeff = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * W + coeff * W @ W


def exp(xi) -> PoseSE3:
    """Exponential map of a twist ``[omega; v]``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("exp: non-finite twist")
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < SMALL_ANGLE:
        q = np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * omega * (1.0 - theta * theta / 24.0)])
    else:
        q = np.concatenate([[math.cos(half)], math.sin(half) / theta * omega])
    return PoseSE3(q, left_jacobian_so3(omega) @ v)


def log(pose: PoseSE3) -> np.ndarray:
    """Logarithm on the principal branch; raises near a rotation of pi."""
    q = pose.quaternion
    w = float(q[0])
    vec = q[1:]
    s = float(np.linalg.norm(vec))
    theta = 2.0 * math.atan2(s, w)
    if theta >= math.pi - BRANCH_MARGIN:
        raise BranchAmbiguityError(f"rotation angle {theta:.9f} is at the log branch cut")
    if s < 0.5 * SMALL_ANGLE:
        # atan2(s, w)/s ~ 1/w (1 - s^2/(3 w^2))
        omega = 2.0 * vec / w * (1.0 - s * s / (3.0 * w * w))
    else:
        omega = theta / s * vec
    v = left_jacobian_so3_inv(omega) @ pose.translation
    return np.concatenate([omega, v])


def adjoint(pose: PoseSE3) -> np.ndarray:
    """6x6 adjoint ``[[R, 0], [skew(t) R, R]]`` for ``[rotation; translation]``."""
    R = pose.rotation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(pose.translation) @ R
    return Ad


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(N, 3) float array of points with a frame tag (``map``, ``lidar``, ``submap:<i>``)."""

    points: np.ndarray
    frame: str = "map"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, frame: str = "map") -> PointCloud:
        return cls(np.zeros((0, 3)), frame)


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def transform_cloud(pose: PoseSE3, cloud, frame: str | None = None) -> PointCloud:
    """Map every point of ``cloud`` through ``pose``; the result carries ``frame``."""
    if frame is None:
        frame = cloud.frame if isinstance(cloud, PointCloud) else "map"
    pts = as_points(cloud)
    if len(pts) == 0:
        return PointCloud.empty(frame)
    return PointCloud(pose.apply(pts), frame)
