"""Analytic airway scene with exact ray-cast rendering.

The scene is a straight tube (inner cylinder wall of radius R along +z,
z in [0, length]) with a spherical obstruction centered on the wall; only
the inward-protruding cap of the sphere is visible from inside. Rendered
inverse depth is 1/z_cam (pinhole depth, not ray length), so rendering
and back-projection are exact inverses of each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fusion import KeyframeRecord
from .geometry import (
    BACKGROUND,
    DISTORTION_NONE,
    OBSTRUCTION,
    CameraIntrinsics,
    LabeledPointCloud,
    Pose,
)

_HIT_EPS = 1e-9


class LumenError(ValueError):
    """A camera position lies outside the free lumen."""


@dataclass(frozen=True)
class AirwayScene:
    """Tube-plus-obstruction geometry, all dimensions in millimeters."""

    cylinder_radius: float = 9.0
    cylinder_length: float = 80.0
    tumor_center: tuple = (9.0, 0.0, 40.0)
    tumor_radius: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "tumor_center",
                           tuple(float(c) for c in self.tumor_center))
        if not 0 < self.tumor_radius < self.cylinder_radius:
            raise ValueError("need 0 < tumor_radius < cylinder_radius")
        cx, cy, cz = self.tumor_center
        if abs(math.hypot(cx, cy) - self.cylinder_radius) > 1e-6:
            raise ValueError("tumor_center must lie on the cylinder wall")
        if not 0 <= cz <= self.cylinder_length:
            raise ValueError("tumor_center must lie within the axial extent")

    def center(self) -> np.ndarray:
        return np.asarray(self.tumor_center, dtype=np.float64)

    def inside_lumen(self, point) -> bool:
        """True when ``point`` is in free space an endoscope can occupy.

        Radial containment is only enforced over the wall's axial range;
        positions just outside the open tube ends are legal approach poses.
        """
        p = np.asarray(point, dtype=np.float64)
        if 0.0 <= p[2] <= self.cylinder_length:
            if math.hypot(p[0], p[1]) >= self.cylinder_radius:
                return False
        return float(np.linalg.norm(p - self.center())) > self.tumor_radius


@dataclass(frozen=True)
class Trajectory:
    """Camera path along the tube with a look-ahead gaze policy.

    "forward" sweeps once from start_z to end_z looking along the travel
    direction; "in_out" adds a return sweep looking backward, the way an
    endoscope is withdrawn, with a lateral sway that peaks mid-pass and
    points away from the obstruction. "inspect" models a lesion
    examination: the camera hugs the wall opposite the obstruction at a
    constant ``lateral_amplitude`` offset, surveys the wall with a gently
    nodding/yawing gaze while in transit, and turns to face the
    obstruction only while passing within ``inspect_range_mm`` of it.
    The transit yaw toward the obstruction side is capped so the
    obstruction never enters the field of view from afar; it is only ever
    imaged close up.
    """

    n_frames: int = 40
    start_z: float = 14.0
    end_z: float = 58.0
    lateral_amplitude: float = 4.0
    policy: str = "inspect"
    look_ahead_mm: float = 12.0
    inspect_range_mm: float = 16.0
    pitch_wobble_deg: float = 12.0
    pitch_cycles: float = 3.5
    yaw_max_deg: float = 18.0
    yaw_margin_deg: float = 4.0
    yaw_cycles: float = 2.5

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.policy not in ("forward", "in_out", "inspect"):
            raise ValueError(f"unknown trajectory policy {self.policy!r}")
        if self.look_ahead_mm <= 0:
            raise ValueError("look_ahead_mm must be positive")
        if self.inspect_range_mm <= 0:
            raise ValueError("inspect_range_mm must be positive")


def _smallest_valid_cylinder_t(t, z, length):
    ok = (t > _HIT_EPS) & np.isfinite(t) & (z >= 0.0) & (z <= length)
    return np.where(ok, t, np.inf)


def _ray_cylinder_batch(origin, dirs, radius, length):
    """Per-ray hit parameter against the finite tube wall (inf = miss)."""
    ox, oy, oz = origin
    dx = dirs[:, 0]
    dy = dirs[:, 1]
    dz = dirs[:, 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / a
        t2 = (-b + sq) / a
    hit_possible = (disc >= 0.0) & (a > 0.0)
    t1 = np.where(hit_possible, t1, np.inf)
    t2 = np.where(hit_possible, t2, np.inf)
    c1 = _smallest_valid_cylinder_t(t1, oz + t1 * dz, length)
    c2 = _smallest_valid_cylinder_t(t2, oz + t2 * dz, length)
    return np.minimum(c1, c2)


def _ray_sphere_batch(origin, dirs, center, radius):
    """Per-ray smallest positive hit parameter against a sphere (inf = miss)."""
    oc = np.asarray(origin, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        t1 = (-b - sq) / a
        t2 = (-b + sq) / a
    t1 = np.where((disc >= 0.0) & (t1 > _HIT_EPS), t1, np.inf)
    t2 = np.where((disc >= 0.0) & (t2 > _HIT_EPS), t2, np.inf)
    return np.minimum(t1, t2)


def ray_cylinder(origin, direction, radius: float, length: float):
    """Smallest positive parameter where the ray meets the finite tube
    wall ``x^2 + y^2 = radius^2, z in [0, length]``, or None."""
    d = np.asarray(direction, dtype=np.float64)
    if np.allclose(d, 0.0):
        raise ValueError("ray direction must be nonzero")
    t = _ray_cylinder_batch(np.asarray(origin, dtype=np.float64),
                            d.reshape(1, 3), radius, length)[0]
    return float(t) if np.isfinite(t) else None


def ray_sphere(origin, direction, center, radius: float):
    """Smallest positive parameter where the ray meets the sphere, or None."""
    d = np.asarray(direction, dtype=np.float64)
    if np.allclose(d, 0.0):
        raise ValueError("ray direction must be nonzero")
    t = _ray_sphere_batch(np.asarray(origin, dtype=np.float64),
                          d.reshape(1, 3), center, radius)[0]
    return float(t) if np.isfinite(t) else None


def render_keyframe(scene: AirwayScene, pose: Pose, k: CameraIntrinsics,
                    depth_jitter: float = 0.0, rng=None):
    """Ray-cast one frame; returns (inverse depth map, obstruction mask).

    Rays pass through pixel centers. Inverse depth is 1/z_cam of the
    nearest hit (0 marks no hit); the mask is 1 where the nearest hit is
    the obstruction. ``depth_jitter`` adds Gaussian noise (mm std) to the
    hit depth before inversion.
    """
    if k.distortion_model != DISTORTION_NONE:
        raise ValueError("rendering requires distortion-free intrinsics")
    origin = pose.t
    if not scene.inside_lumen(origin):
        raise LumenError(f"camera at {origin.tolist()} is outside the free lumen")

    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    dirs_cam = np.stack([
        ((xs - k.cx) / k.fx).ravel(),
        ((ys - k.cy) / k.fy).ravel(),
        np.ones(k.width * k.height),
    ], axis=1)
    dirs_world = dirs_cam @ pose.matrix().T

    t_wall = _ray_cylinder_batch(origin, dirs_world, scene.cylinder_radius,
                                 scene.cylinder_length)
    t_tumor = _ray_sphere_batch(origin, dirs_world, scene.center(),
                                scene.tumor_radius)
    t = np.minimum(t_wall, t_tumor)
    hit = np.isfinite(t)
    # dirs_cam z-component is 1, so the hit parameter equals pinhole depth.
    depth = np.where(hit, t, np.inf)
    if depth_jitter > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        depth = depth + np.where(hit, rng.normal(0.0, depth_jitter, size=depth.shape), 0.0)
        depth = np.maximum(depth, 1e-6)
    with np.errstate(divide="ignore"):
        inv_depth = np.where(hit, 1.0 / depth, 0.0)
    mask = (hit & (t_tumor <= t_wall)).astype(np.uint8)
    return inv_depth.reshape(k.height, k.width), mask.reshape(k.height, k.width)


def sample_surface(scene: AirwayScene, n: int, seed: int = 0) -> LabeledPointCloud:
    """Area-weighted uniform samples of the interior-visible surfaces.

    Candidates are drawn uniformly over the full wall and full sphere in
    proportion to their total areas, then rejected where not visible from
    inside the lumen (wall inside the sphere; sphere outside the tube
    interior), which leaves a uniform sample of the visible union.
    Deterministic for a given seed.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    radius = scene.cylinder_radius
    length = scene.cylinder_length
    center = scene.center()
    r = scene.tumor_radius
    wall_area = 2.0 * math.pi * radius * length
    sphere_area = 4.0 * math.pi * r * r
    p_wall = wall_area / (wall_area + sphere_area)

    points = []
    labels = []
    remaining = n
    while remaining > 0:
        m = max(1024, int(1.5 * remaining))
        pick_wall = rng.random(m) < p_wall

        theta = rng.uniform(0.0, 2.0 * math.pi, m)
        z = rng.uniform(0.0, length, m)
        wall_pts = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)

        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        sph_pts = center + r * dirs

        cand = np.where(pick_wall[:, None], wall_pts, sph_pts)
        wall_ok = np.linalg.norm(cand - center, axis=1) > r
        sph_ok = (
            (np.hypot(cand[:, 0], cand[:, 1]) < radius)
            & (cand[:, 2] >= 0.0) & (cand[:, 2] <= length)
        )
        ok = np.where(pick_wall, wall_ok, sph_ok)
        points.append(cand[ok])
        labels.append(np.where(pick_wall[ok], BACKGROUND, OBSTRUCTION).astype(np.uint8))
        remaining -= int(np.count_nonzero(ok))

    pts = np.vstack(points)[:n]
    labs = np.concatenate(labels)[:n]
    return LabeledPointCloud(pts, labs)


def _look_at_pose(position, target) -> Pose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("camera target coincides with its position")
    zc = forward / norm
    up_hint = np.array([0.0, 1.0, 0.0])
    xc = np.cross(up_hint, zc)
    xn = np.linalg.norm(xc)
    if xn < 1e-12:
        # Looking straight along world y; fall back to world x as right.
        xc = np.array([1.0, 0.0, 0.0])
        xn = 1.0
    xc = xc / xn
    yc = np.cross(zc, xc)
    R = np.stack([xc, yc, zc], axis=1)
    return Pose.from_matrix(R, position)


def trajectory_poses(scene: AirwayScene, traj: Trajectory,
                     k: CameraIntrinsics | None = None):
    """Camera-to-world poses along the trajectory (deterministic).

    The "inspect" policy needs the horizontal field of view to keep the
    obstruction out of frame during transit; it is taken from ``k`` when
    given, otherwise a 16 degree half-angle is assumed.
    """
    center = scene.center()
    lat_norm = math.hypot(center[0], center[1])
    if lat_norm > 0:
        away = np.array([-center[0] / lat_norm, -center[1] / lat_norm, 0.0])
    else:
        away = np.array([1.0, 0.0, 0.0])
    toward = -away
    half_fov = math.atan(k.width / (2.0 * k.fx)) if k is not None else math.radians(16.0)

    if traj.policy == "forward":
        passes = [(traj.start_z, traj.end_z, traj.n_frames)]
    else:
        n_fwd = (traj.n_frames + 1) // 2
        passes = [(traj.start_z, traj.end_z, n_fwd),
                  (traj.end_z, traj.start_z, traj.n_frames - n_fwd)]

    poses = []
    for z_from, z_to, count in passes:
        if count == 0:
            continue
        zs = np.linspace(z_from, z_to, count)
        direction = 1.0 if z_to >= z_from else -1.0
        for i, z in enumerate(zs):
            s = i / (count - 1) if count > 1 else 0.0
            if traj.policy == "inspect":
                position = away * traj.lateral_amplitude + np.array([0.0, 0.0, z])
                poses.append(_inspect_pose(traj, scene, position, direction, s,
                                           toward, half_fov))
            else:
                offset = traj.lateral_amplitude * math.sin(math.pi * s)
                position = away * offset + np.array([0.0, 0.0, z])
                target = np.array([0.0, 0.0, z + direction * traj.look_ahead_mm])
                poses.append(_look_at_pose(position, target))
    return poses


def _inspect_pose(traj: Trajectory, scene: AirwayScene, position, direction: float,
                  s: float, toward, half_fov: float) -> Pose:
    """Transit gaze with wall-survey wobble, blended to face the lesion.

    The yaw toward the obstruction side is capped below the angle at
    which the obstruction would enter the horizontal field of view, so
    transit frames never image it; within ``inspect_range_mm`` the gaze
    blends onto the obstruction itself (with the vertical nod kept, so
    its flanks get imaged too).
    """
    center = scene.center()
    z = position[2]
    lat_dist = math.hypot(center[0] - position[0], center[1] - position[1])
    # The exclusion must clear the lesion's inner edge, not just its center.
    lat_edge = max(lat_dist - scene.tumor_radius, 0.1)
    ahead = (center[2] - z) * direction
    pitch = math.radians(traj.pitch_wobble_deg) * math.sin(2.0 * math.pi * traj.pitch_cycles * s)
    yaw_cap = math.radians(traj.yaw_max_deg)
    if ahead > 0.5:
        safe = math.atan2(lat_edge, ahead) - half_fov - math.radians(traj.yaw_margin_deg)
        yaw_cap = min(yaw_cap, max(0.0, safe))
    yaw = yaw_cap * 0.5 * (1.0 - math.cos(2.0 * math.pi * traj.yaw_cycles * s))

    gaze = (direction * np.array([0.0, 0.0, 1.0])
            + math.tan(yaw) * toward
            + math.tan(pitch) * np.array([0.0, 1.0, 0.0]))
    gaze /= np.linalg.norm(gaze)
    target = position + traj.look_ahead_mm * gaze
    w = max(0.0, 1.0 - abs(z - center[2]) / traj.inspect_range_mm)
    if w > 0.0:
        nod = np.array([0.0, lat_dist * math.tan(pitch), 0.0])
        target = (1.0 - w) * target + w * (center + nod)
    return _look_at_pose(position, target)


def generate_sequence(scene: AirwayScene, traj: Trajectory, k: CameraIntrinsics,
                      seed: int = 0, depth_jitter: float = 0.0):
    """Render the trajectory into a list of keyframe records.

    Byte-reproducible for a given seed. Raises :class:`LumenError` naming
    the frame if any pose leaves the free lumen.
    """
    rng = np.random.default_rng(seed)
    poses = trajectory_poses(scene, traj, k)
    records = []
    for i, pose in enumerate(poses):
        if not scene.inside_lumen(pose.t):
            raise LumenError(f"frame {i}: camera at {pose.t.tolist()} leaves the lumen")
        inv_depth, mask = render_keyframe(scene, pose, k, depth_jitter, rng)
        records.append(KeyframeRecord(i, k, pose, inv_depth, mask))
    return records
