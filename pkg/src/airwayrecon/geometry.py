"""Rigid/similarity transform algebra, camera intrinsics and labeled clouds.

Conventions used throughout the package:

  - World and camera coordinates are in millimeters.
  - Camera frame is the usual computer-vision one: +x right, +y down,
    +z forward along the optical axis.
  - Poses are camera-to-world: ``X_world = R @ X_cam + t``.
  - Quaternions are stored (w, x, y, z), unit norm.
  - Pixel (0, 0) is the *center* of the top-left pixel, so a w x h image
    spans continuous coordinates [-0.5, w - 0.5] x [-0.5, h - 0.5].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Point labels carried by LabeledPointCloud.
BACKGROUND = 0
OBSTRUCTION = 1

# Supported lens distortion models.
DISTORTION_NONE = "none"
DISTORTION_RADTAN = "radtan"
DISTORTION_FISHEYE = "fisheye_equidistant"

_COEFF_COUNT = {DISTORTION_NONE: 0, DISTORTION_RADTAN: 5, DISTORTION_FISHEYE: 4}

UNIT_TOL = 1e-9


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_to_matrix(q) -> np.ndarray:
    """Convert unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a 3x3 rotation matrix to quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    half = 0.5 * angle_rad
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


@dataclass(frozen=True)
class Pose:
    """SE(3) camera-to-world transform: ``X_world = R @ X_cam + t`` (mm)."""

    q: np.ndarray  # unit quaternion (w, x, y, z)
    t: np.ndarray  # translation, mm

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite components")
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)!r} not unit")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix."""
        return quat_to_matrix(self.q)

    def matrix4(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        M = np.eye(4)
        M[:3, :3] = self.matrix()
        M[:3, 3] = self.t
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points, shape (3,) or (N, 3), into the world."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix().T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.apply(other.t)
        return Pose(q, t)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        Ri = self.matrix().T
        return Pose(quat_normalize(qi), -(Ri @ self.t))


@dataclass(frozen=True)
class SimilarityTransform:
    """Scaled rigid transform: ``y = scale * R @ x + t`` (mm)."""

    scale: float
    q: np.ndarray  # unit quaternion (w, x, y, z)
    t: np.ndarray  # translation, mm

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if not (s > 0 and np.isfinite(s)):
            raise ValueError(f"scale must be positive, got {s!r}")
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise ValueError("quaternion norm not unit")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix4(self) -> np.ndarray:
        """4x4 matrix with the scale folded into the rotation block."""
        M = np.eye(4)
        M[:3, :3] = self.scale * self.matrix()
        M[:3, 3] = self.t
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.matrix().T) + self.t

    def inverse(self) -> "SimilarityTransform":
        qi = quat_conjugate(self.q)
        Ri = self.matrix().T
        si = 1.0 / self.scale
        return SimilarityTransform(si, quat_normalize(qi), -si * (Ri @ self.t))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self o other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        return SimilarityTransform(self.scale * other.scale, q, self.apply(other.t))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus an optional lens distortion model.

    fx, fy, cx, cy are in pixels; width/height give the image size the
    parameters refer to. ``coefficients`` is (k1, k2, p1, p2, k3) for
    radtan and (k1, k2, k3, k4) for fisheye_equidistant.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion_model: str = DISTORTION_NONE
    coefficients: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.distortion_model not in _COEFF_COUNT:
            raise ValueError(f"unknown distortion model {self.distortion_model!r}")
        n = _COEFF_COUNT[self.distortion_model]
        if len(self.coefficients) != n:
            raise ValueError(
                f"{self.distortion_model} expects {n} coefficients, "
                f"got {len(self.coefficients)}")

    @property
    def has_distortion(self) -> bool:
        return self.distortion_model != DISTORTION_NONE and any(
            c != 0 for c in self.coefficients)

    def matrix(self) -> np.ndarray:
        """3x3 camera matrix K."""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class LabeledPointCloud:
    """3D points (mm) with a parallel BACKGROUND/OBSTRUCTION label array."""

    points: np.ndarray  # (N, 3) float64
    labels: np.ndarray  # (N,) uint8

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.uint8).reshape(-1))
        if len(self.points) != len(self.labels):
            raise ValueError(
                f"points ({len(self.points)}) and labels ({len(self.labels)}) differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "LabeledPointCloud":
        return cls(np.empty((0, 3)), np.empty(0, dtype=np.uint8))

    def obstruction_mask(self) -> np.ndarray:
        return self.labels == OBSTRUCTION

    def transformed(self, transform: SimilarityTransform) -> "LabeledPointCloud":
        return LabeledPointCloud(transform.apply(self.points), self.labels.copy())

    def concat(self, other: "LabeledPointCloud") -> "LabeledPointCloud":
        return LabeledPointCloud(
            np.vstack([self.points, other.points]),
            np.concatenate([self.labels, other.labels]),
        )
