"""SE(3) poses, pinhole cameras and projection.

Pose convention: a pose maps world points into the camera frame,
``p_c = R p_w + t``. Rotations are stored as unit quaternions in
(w, x, y, z) order; matrices are materialized on demand.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityViolation

__all__ = [
    "RigidPose",
    "PinholeCamera",
    "quat_multiply",
    "quat_rotate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_axis_angle",
    "compose",
    "project",
    "unproject",
    "distort_normalized",
]


def quat_multiply(q1, q2):
    """Hamilton product of two (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(rot):
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (rot[2, 1] - rot[1, 2]) / s,
            (rot[0, 2] - rot[2, 0]) / s,
            (rot[1, 0] - rot[0, 1]) / s,
        ])
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        q = np.array([
            (rot[2, 1] - rot[1, 2]) / s,
            0.25 * s,
            (rot[0, 1] + rot[1, 0]) / s,
            (rot[0, 2] + rot[2, 0]) / s,
        ])
    elif rot[1, 1] > rot[2, 2]:
        s = np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        q = np.array([
            (rot[0, 2] - rot[2, 0]) / s,
            (rot[0, 1] + rot[1, 0]) / s,
            0.25 * s,
            (rot[1, 2] + rot[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        q = np.array([
            (rot[1, 0] - rot[0, 1]) / s,
            (rot[0, 2] + rot[2, 0]) / s,
            (rot[1, 2] + rot[2, 1]) / s,
            0.25 * s,
        ])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_from_axis_angle(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_rotate(q, pts):
    """Rotate one point or an (N, 3) stack by quaternion q."""
    return np.asarray(pts, dtype=np.float64) @ quat_to_matrix(q).T


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform: p_c = R p_w + t."""

    quat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("quaternion must be finite and nonzero")
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot, t):
        return cls(matrix_to_quat(rot), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad, t=(0.0, 0.0, 0.0)):
        return cls(quat_from_axis_angle(axis, angle_rad), np.asarray(t, float))

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.quat)

    @property
    def center(self):
        """Camera center in world coordinates, -R^T t."""
        return -(self.rotation_matrix.T @ self.t)

    def apply(self, pts):
        """Map world points (3,) or (N, 3) into the camera frame."""
        return quat_rotate(self.quat, pts) + self.t

    def inverse(self):
        qinv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidPose(qinv, -quat_rotate(qinv, self.t))

    def angle_to(self, other):
        """Relative rotation angle in degrees."""
        dot = abs(float(np.dot(self.quat, other.quat)))
        return np.degrees(2.0 * np.arccos(min(1.0, dot)))


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose composition: (a o b)(p) = a(b(p))."""
    return RigidPose(quat_multiply(a.quat, b.quat), quat_rotate(a.quat, b.t) + a.t)


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics with 4-parameter radial-tangential distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        d = np.asarray(self.distortion, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(d)):
            raise ValueError("distortion coefficients must be finite")
        object.__setattr__(self, "distortion", d)

    @property
    def has_distortion(self):
        return bool(np.any(self.distortion != 0.0))

    @property
    def K(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def contains(self, pix):
        pix = np.atleast_2d(pix)
        return (
            (pix[:, 0] >= 0) & (pix[:, 0] <= self.width - 1)
            & (pix[:, 1] >= 0) & (pix[:, 1] <= self.height - 1)
        )


def distort_normalized(cam: PinholeCamera, xy):
    """Apply the forward (k1, k2, p1, p2) model to normalized coordinates."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    k1, k2, p1, p2 = cam.distortion
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.column_stack([xd, yd])


def project(cam: PinholeCamera, pose: RigidPose, p_w) -> np.ndarray:
    """Project one world point to a pixel.

    Raises CheiralityViolation when the point is not in front of the camera.
    """
    pc = pose.apply(np.asarray(p_w, dtype=np.float64).reshape(3))
    if pc[2] <= 0.0:
        raise CheiralityViolation(f"point behind camera (z_c = {pc[2]:.6g})")
    xy = pc[:2] / pc[2]
    if cam.has_distortion:
        xy = distort_normalized(cam, xy)[0]
    return np.array([cam.fx * xy[0] + cam.cx, cam.fy * xy[1] + cam.cy])


def project_many(cam: PinholeCamera, pose: RigidPose, pts_w):
    """Project (N, 3) world points; returns (pixels (N, 2), in_front (N,) mask).

    Points behind the camera get NaN pixels instead of raising.
    """
    pc = pose.apply(np.asarray(pts_w, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    ok = z > 0.0
    xy = np.full((pc.shape[0], 2), np.nan)
    xy[ok] = pc[ok, :2] / z[ok, None]
    if cam.has_distortion:
        xy[ok] = distort_normalized(cam, xy[ok])
    pix = np.column_stack([cam.fx * xy[:, 0] + cam.cx, cam.fy * xy[:, 1] + cam.cy])
    return pix, ok


def unproject(cam: PinholeCamera, pose: RigidPose, pixel, depth: float):
    """Back-project an (undistorted) pixel at a given camera-frame depth.

    Inverse of `project` for zero-distortion cameras.
    """
    if depth <= 0:
        raise CheiralityViolation("depth must be positive")
    x = (pixel[0] - cam.cx) / cam.fx
    y = (pixel[1] - cam.cy) / cam.fy
    pc = depth * np.array([x, y, 1.0])
    return pose.inverse().apply(pc)
