"""Back-projection of inverse-depth maps into labeled world-space clouds.

Inverse depth is 1/z_cam in 1/mm, where z_cam is the pinhole depth
coordinate (not the ray length). Entries that are zero, negative or
non-finite mark invalid pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import DISTORTION_NONE, CameraIntrinsics, LabeledPointCloud, OBSTRUCTION, Pose
from .imaging import rescale_mask_nearest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionFilter:
    """Point selection thresholds applied during fusion.

    Defaults assume airway scale: ranges between 1 mm (inverse depth 1)
    and 300 mm (inverse depth 1/300), an 8 px border margin, and no pixel
    subsampling.
    """

    min_inv_depth: float = 1.0 / 300.0
    max_inv_depth: float = 1.0
    border_margin: int = 8
    pixel_stride: int = 1

    def __post_init__(self):
        if not (0 <= self.min_inv_depth < self.max_inv_depth):
            raise ValueError("need 0 <= min_inv_depth < max_inv_depth")
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if self.border_margin < 0:
            raise ValueError("border_margin must be >= 0")


@dataclass
class KeyframeRecord:
    """One keyframe's inputs: undistorted intrinsics, pose, inverse depth, mask.

    ``intrinsics`` must be distortion-free and sized like ``inv_depth``;
    the mask may have a different resolution and is rescaled at fusion
    time.
    """

    frame_id: int
    intrinsics: CameraIntrinsics
    pose: Pose
    inv_depth: np.ndarray  # (h, w) float, 1/mm
    mask: np.ndarray  # (h, w) uint8 {0, 1}

    def __post_init__(self):
        self.inv_depth = np.asarray(self.inv_depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.intrinsics.distortion_model != DISTORTION_NONE:
            raise ValueError("keyframe intrinsics must be distortion-free")
        if self.inv_depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"inverse depth shape {self.inv_depth.shape} does not match "
                f"intrinsics {self.intrinsics.height}x{self.intrinsics.width}")
        if self.mask.ndim != 2:
            raise ValueError("mask must be 2D")


def backproject_pixel(u, v, inv_depth, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Back-project pixel(s) at inverse depth (1/mm) into world space.

    ``X_cam = (1/d) * ((u - cx)/fx, (v - cy)/fy, 1)`` followed by the
    camera-to-world pose. Accepts scalars or same-shape arrays; returns
    (3,) or (N, 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(inv_depth, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("inverse depth must be positive and finite")
    if k.distortion_model != DISTORTION_NONE:
        raise ValueError("backprojection requires distortion-free intrinsics")
    z = 1.0 / d
    x_cam = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=-1)
    return pose.apply(x_cam)


def project_point(points, k: CameraIntrinsics, pose: Pose):
    """Project world point(s) into the camera; inverse of backproject_pixel.

    Returns (u, v, inv_depth, in_front) arrays where ``in_front`` flags
    points with positive camera depth; u/v/inv_depth are NaN elsewhere.
    """
    if k.distortion_model != DISTORTION_NONE:
        raise ValueError("projection requires distortion-free intrinsics")
    pts = np.asarray(points, dtype=np.float64)
    x_cam = pose.inverse().apply(pts)
    x_cam = np.atleast_2d(x_cam)
    z = x_cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, k.fx * x_cam[:, 0] / z + k.cx, np.nan)
        v = np.where(in_front, k.fy * x_cam[:, 1] / z + k.cy, np.nan)
        d = np.where(in_front, 1.0 / z, np.nan)
    if np.asarray(points).ndim == 1:
        return u[0], v[0], d[0], bool(in_front[0])
    return u, v, d, in_front


def fuse_keyframe(rec: KeyframeRecord, filt: FusionFilter = FusionFilter()) -> LabeledPointCloud:
    """Fuse one keyframe into a labeled world-space cloud.

    The mask is rescaled to the inverse-depth resolution, then every pixel
    on the stride grid inside the border margin with an inverse depth in
    the configured range is back-projected. Points are emitted in
    row-major pixel order.
    """
    h, w = rec.inv_depth.shape
    mask = rec.mask
    if mask.shape != (h, w):
        mask = rescale_mask_nearest(mask, w, h)

    us = np.arange(filt.border_margin, w - filt.border_margin, filt.pixel_stride)
    vs = np.arange(filt.border_margin, h - filt.border_margin, filt.pixel_stride)
    if len(us) == 0 or len(vs) == 0:
        return LabeledPointCloud.empty()
    uu, vv = np.meshgrid(us, vs)
    uu = uu.ravel()
    vv = vv.ravel()
    d = rec.inv_depth[vv, uu]
    keep = np.isfinite(d) & (d > filt.min_inv_depth) & (d < filt.max_inv_depth)
    n_skipped = int(np.count_nonzero(~keep))
    uu, vv, d = uu[keep], vv[keep], d[keep]
    if len(uu) == 0:
        logger.debug("frame %d: no valid pixels (%d skipped)", rec.frame_id, n_skipped)
        return LabeledPointCloud.empty()

    points = backproject_pixel(uu.astype(np.float64), vv.astype(np.float64),
                               d, rec.intrinsics, rec.pose)
    labels = mask[vv, uu].astype(np.uint8)
    logger.debug("frame %d: fused %d points (%d skipped)",
                 rec.frame_id, len(points), n_skipped)
    return LabeledPointCloud(points, labels)


def fuse_sequence(records, filt: FusionFilter = FusionFilter()) -> LabeledPointCloud:
    """Fuse keyframes in input order into one cloud (deterministic)."""
    records = list(records)
    if not records:
        raise ValueError("cannot fuse an empty keyframe sequence")
    parts = [fuse_keyframe(rec, filt) for rec in records]
    return LabeledPointCloud(
        np.vstack([p.points for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )


def voxel_downsample(cloud: LabeledPointCloud, voxel: float) -> LabeledPointCloud:
    """One point per occupied voxel, at the member centroid.

    The voxel label is the member majority; ties go to OBSTRUCTION.
    Output order follows the lexicographic voxel key, so results are
    deterministic.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return LabeledPointCloud.empty()
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = cloud.points[order]
    labs = cloud.labels[order]
    boundaries = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    counts = np.diff(np.concatenate((starts, [len(keys)])))
    sums = np.add.reduceat(pts, starts, axis=0)
    obst = np.add.reduceat((labs == OBSTRUCTION).astype(np.int64), starts)
    centroids = sums / counts[:, None]
    labels = (2 * obst >= counts).astype(np.uint8)
    return LabeledPointCloud(centroids, labels)
