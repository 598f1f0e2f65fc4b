"""SE(3) geometry with explicit frame bookkeeping.

Conventions used throughout the package:

* rotations are stored as unit quaternions ``[w, x, y, z]`` and renormalized
  after every composition;
* twists are 6-vectors with the rotational part first,
  ``[wx, wy, wz, vx, vy, vz]``, and covariances use the same block order;
* a ``Pose`` maps coordinates from its child frame into its parent frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FrameMismatchError, RotationDomainError

# Twists are plain 6-vectors, rotation part first.
Twist = np.ndarray

_SMALL_ANGLE = 1e-8


def _as_fixed(a, shape) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite values")
    out.setflags(write=False)
    return out


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(m).as_quat()
    return np.array([w, x, y, z])


def quat_rotate(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ quat_to_matrix(q).T


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector."""
    return Rotation.from_rotvec(phi).as_matrix()


def so3_log(m: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix."""
    return Rotation.from_matrix(m).as_rotvec()


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V matrix coupling rotation and translation in the SE(3) exponential."""
    theta2 = float(phi @ phi)
    px = skew(phi)
    if theta2 < _SMALL_ANGLE**2:
        return np.eye(3) + 0.5 * px + (px @ px) / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * px + b * (px @ px)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    px = skew(phi)
    if theta2 < _SMALL_ANGLE**2:
        return np.eye(3) - 0.5 * px + (px @ px) / 12.0
    theta = np.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * px + c * (px @ px)


def _se3_q_matrix(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # Translation-rotation coupling block of the SE(3) left Jacobian
    # (Barfoot-style closed form with small-angle series fallbacks).
    px = skew(phi)
    rx = skew(rho)
    theta2 = float(phi @ phi)
    if theta2 < 1e-10:
        c2, c3, c4 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        theta = np.sqrt(theta2)
        theta4 = theta2 * theta2
        c2 = (theta - np.sin(theta)) / (theta2 * theta)
        c3 = (theta2 + 2.0 * np.cos(theta) - 2.0) / (2.0 * theta4)
        c4 = (2.0 * theta - 3.0 * np.sin(theta) + theta * np.cos(theta)) / (2.0 * theta4 * theta)
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    q = 0.5 * rx
    q += c2 * (pxrx + rxpx + pxrxpx)
    q += c3 * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
    q += c4 * (pxrxpx @ px + px @ pxrxpx)
    return q


def se3_left_jacobian_inv(xi: Twist) -> np.ndarray:
    """Inverse left Jacobian of SE(3), rotation-first block layout."""
    phi, rho = xi[:3], xi[3:]
    jinv = so3_left_jacobian_inv(phi)
    q = _se3_q_matrix(phi, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[3:, :3] = -jinv @ q @ jinv
    return out


def se3_right_jacobian_inv(xi: Twist) -> np.ndarray:
    return se3_left_jacobian_inv(-xi)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping child-frame coordinates into the parent frame."""

    rotation: np.ndarray  # unit quaternion [w, x, y, z]
    translation: np.ndarray  # meters
    parent_frame: str = ""
    child_frame: str = ""

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError("rotation must be a finite quaternion [w, x, y, z]")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        q = q / n
        nz = q[np.nonzero(q)[0][0]]
        if nz < 0.0:  # canonical sign, keeps serialization unique
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _as_fixed(self.translation, (3,)))

    @classmethod
    def identity(cls, frame: str = "") -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), frame, frame)

    @classmethod
    def from_matrix(cls, m: np.ndarray, parent_frame: str = "", child_frame: str = "") -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0.0:
            raise ValueError("matrix rotation block is not a proper rotation")
        return cls(matrix_to_quat(r), m[:3, 3], parent_frame, child_frame)

    @classmethod
    def from_rt(
        cls, rotation_matrix: np.ndarray, translation: np.ndarray,
        parent_frame: str = "", child_frame: str = "",
    ) -> "Pose":
        return cls(matrix_to_quat(rotation_matrix), translation, parent_frame, child_frame)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        if self.child_frame != other.parent_frame:
            raise FrameMismatchError(
                f"cannot compose: child frame {self.child_frame!r} != parent frame {other.parent_frame!r}"
            )
        q = quat_mul(self.rotation, other.rotation)
        t = quat_rotate(self.rotation, other.translation[None, :])[0] + self.translation
        return Pose(q, t, self.parent_frame, other.child_frame)

    def inverse(self) -> "Pose":
        qc = quat_conj(self.rotation)
        t = -quat_rotate(qc, self.translation[None, :])[0]
        return Pose(qc, t, self.child_frame, self.parent_frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) child-frame points into the parent frame."""
        return quat_rotate(self.rotation, np.atleast_2d(points)) + self.translation

    def retract(self, xi: Twist) -> "Pose":
        """Right-multiplicative increment: self composed with exp(xi)."""
        return self.compose(se3_exp(xi, self.child_frame, self.child_frame))

    def with_frames(self, parent_frame: str, child_frame: str) -> "Pose":
        return Pose(self.rotation, self.translation, parent_frame, child_frame)

    def rotation_angle(self) -> float:
        w = min(1.0, abs(float(self.rotation[0])))
        return 2.0 * np.arccos(w)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(
            np.max(np.abs(self.rotation - other.rotation)),
            np.max(np.abs(self.rotation + other.rotation)),
        )
        return dq < tol and np.max(np.abs(self.translation - other.translation)) < tol


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(a: Pose) -> Pose:
    return a.inverse()


def se3_log(a: Pose) -> Twist:
    """Twist of a pose; rotation angle must stay below pi."""
    phi = Rotation.from_quat(
        [a.rotation[1], a.rotation[2], a.rotation[3], a.rotation[0]]
    ).as_rotvec()
    angle = np.linalg.norm(phi)
    if angle >= np.pi - 1e-6:
        raise RotationDomainError(f"rotation angle {angle:.6f} too close to pi")
    v_inv = so3_left_jacobian_inv(phi)
    rho = v_inv @ a.translation
    return np.concatenate([phi, rho])


def se3_exp(xi: Twist, parent_frame: str = "", child_frame: str = "") -> Pose:
    """Pose of a twist; inverse of :func:`se3_log` below pi."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise ValueError("twist must be a 6-vector")
    phi, rho = xi[:3], xi[3:]
    r = so3_exp(phi)
    t = so3_left_jacobian(phi) @ rho
    return Pose.from_rt(r, t, parent_frame, child_frame)


def se3_adjoint(a: Pose) -> np.ndarray:
    """Adjoint matrix mapping twists between frames, rotation-first layout."""
    r = a.rotation_matrix()
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[3:, :3] = skew(a.translation) @ r
    return out


@dataclass(frozen=True)
class PointCloud:
    """Points with the frame they are expressed in."""

    points: np.ndarray  # (N, 3) float64
    frame: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 3))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("empty cloud has no bounding box")
        return self.points.min(axis=0), self.points.max(axis=0)


def transform_points(p: Pose, c: PointCloud) -> PointCloud:
    """Re-express a cloud in the pose's parent frame."""
    if c.frame != p.child_frame:
        raise FrameMismatchError(
            f"cloud frame {c.frame!r} does not match pose child frame {p.child_frame!r}"
        )
    return PointCloud(p.apply(c.points), p.parent_frame)
