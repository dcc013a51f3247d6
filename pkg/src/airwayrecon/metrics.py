"""Reconstruction-vs-CT metrics and the distance heatmap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionFilter, fuse_keyframe, project_point
from .geometry import LabeledPointCloud
from .registration import NearestNeighborIndex

POLICY_ALL_KEYFRAMES = "all_keyframes"
POLICY_SOURCE_FRAME_ONLY = "source_frame_only"


class PrecisionUndefinedError(RuntimeError):
    """No obstruction point produced a valid in-frame projection."""


@dataclass
class MetricsReport:
    """All reported quantities for one evaluated reconstruction."""

    coverage_pct: float
    coverage_threshold_mm: float
    median_closest_mm: float
    chamfer_one_sided_mm: float
    hausdorff_one_sided_mm: float
    seg_precision_pct: float  # NaN when undefined
    counts: dict = field(default_factory=dict)
    registration: dict = field(default_factory=dict)


@dataclass
class HeatmapCloud:
    """Points colored by distance-to-closest-point (blue near, red far)."""

    points: np.ndarray  # (N, 3) mm
    distances: np.ndarray  # (N,) mm
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        if not (len(self.points) == len(self.distances) == len(self.colors)):
            raise ValueError("heatmap arrays must have equal length")


def closest_distances(points: np.ndarray, to_index: NearestNeighborIndex) -> np.ndarray:
    """Exact per-point Euclidean distance to the nearest indexed point."""
    pts = points.points if isinstance(points, LabeledPointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty query cloud")
    _, dist = to_index.query(pts)
    return dist


def coverage(ct, recon_index: NearestNeighborIndex, threshold: float = 1.0) -> float:
    """Percentage of CT points with a reconstructed point within threshold.

    Note the direction: ground truth toward reconstruction.
    """
    d = closest_distances(ct, recon_index)
    return 100.0 * float(np.count_nonzero(d <= threshold)) / len(d)


def chamfer_one_sided(recon, ct_index: NearestNeighborIndex) -> float:
    """Mean reconstruction-to-CT closest-point distance (mm)."""
    return float(np.mean(closest_distances(recon, ct_index)))


def hausdorff_one_sided(recon, ct_index: NearestNeighborIndex) -> float:
    """Max reconstruction-to-CT closest-point distance (mm)."""
    return float(np.max(closest_distances(recon, ct_index)))


def median_closest(recon, ct_index: NearestNeighborIndex) -> float:
    """Median reconstruction-to-CT closest-point distance (mm)."""
    return float(np.median(closest_distances(recon, ct_index)))


def _mask_lookup_coords(u, v, frame_w, frame_h, mask_w, mask_h):
    """Map projected frame coordinates onto the mask grid.

    Identity when the mask matches the frame resolution; otherwise the
    same pixel-center scaling used by mask rescaling, so fusion labels and
    re-projection lookups agree exactly.
    """
    if (mask_w, mask_h) == (frame_w, frame_h):
        return u, v
    return ((u + 0.5) * (mask_w / frame_w) - 0.5,
            (v + 0.5) * (mask_h / frame_h) - 0.5)


def segmentation_precision(cloud: LabeledPointCloud, keyframes,
                           policy: str = POLICY_ALL_KEYFRAMES,
                           fusion_filter: FusionFilter | None = None):
    """Fraction of obstruction points that re-project inside keyframe masks.

    Points behind a camera or outside the image are excluded from the
    denominator and reported separately. With ``source_frame_only`` each
    keyframe only checks the contiguous block of points it produced, which
    on unmodified fused clouds is an exact round trip.

    Returns (precision_pct, counts dict); raises
    :class:`PrecisionUndefinedError` when no projection is valid.
    """
    keyframes = list(keyframes)
    if not keyframes:
        raise ValueError("no keyframes supplied")
    if policy not in (POLICY_ALL_KEYFRAMES, POLICY_SOURCE_FRAME_ONLY):
        raise ValueError(f"unknown precision policy {policy!r}")
    obst = cloud.points[cloud.obstruction_mask()]
    if len(obst) == 0:
        raise ValueError("cloud has no obstruction points")

    if policy == POLICY_SOURCE_FRAME_ONLY:
        groups = _source_frame_groups(cloud, keyframes,
                                      fusion_filter or FusionFilter())
    else:
        groups = [(rec, obst) for rec in keyframes]

    hits = 0
    valid = 0
    excluded = 0
    for rec, pts in groups:
        if len(pts) == 0:
            continue
        mh, mw = rec.mask.shape
        k = rec.intrinsics
        u, v, _, in_front = project_point(pts, k, rec.pose)
        mu, mv = _mask_lookup_coords(u, v, k.width, k.height, mw, mh)
        with np.errstate(invalid="ignore"):
            ui = np.floor(mu + 0.5)
            vi = np.floor(mv + 0.5)
            ok = in_front & (ui >= 0) & (ui <= mw - 1) & (vi >= 0) & (vi <= mh - 1)
        excluded += int(np.count_nonzero(~ok))
        ui = ui[ok].astype(np.int64)
        vi = vi[ok].astype(np.int64)
        valid += int(np.count_nonzero(ok))
        hits += int(np.count_nonzero(rec.mask[vi, ui] == 1))

    counts = {
        "tumor_points": int(len(obst)),
        "projected_hits": hits,
        "projected_valid": valid,
        "projected_excluded": excluded,
    }
    if valid == 0:
        raise PrecisionUndefinedError(
            f"no valid projections ({excluded} excluded); precision undefined")
    return 100.0 * hits / valid, counts


def _source_frame_groups(cloud: LabeledPointCloud, keyframes, filt: FusionFilter):
    """Split obstruction points back into per-source-frame blocks.

    Relies on fuse_sequence's deterministic ordering: each keyframe
    contributes a contiguous block whose length is its valid-pixel count.
    """
    groups = []
    cursor = 0
    for rec in keyframes:
        n = len(fuse_keyframe(rec, filt))
        block = slice(cursor, cursor + n)
        pts = cloud.points[block]
        labs = cloud.labels[block]
        groups.append((rec, pts[labs == 1]))
        cursor += n
    if cursor != len(cloud):
        raise ValueError(
            f"cloud size {len(cloud)} does not match keyframes "
            f"({cursor} expected); source_frame_only needs an unmodified fused cloud")
    return groups


def heatmap(recon, ct_index: NearestNeighborIndex, d_max: float = 5.0) -> HeatmapCloud:
    """Color every reconstruction point by its CT distance.

    Linear blue (0 mm) to red (>= d_max mm); the red channel rounds
    half-down and blue is its complement so r + b == 255 exactly.
    """
    pts = recon.points if isinstance(recon, LabeledPointCloud) else np.asarray(recon, dtype=np.float64)
    d = closest_distances(pts, ct_index)
    t = np.clip(d / d_max, 0.0, 1.0)
    red = np.ceil(255.0 * t - 0.5).astype(np.int64)
    red = np.clip(red, 0, 255).astype(np.uint8)
    colors = np.stack([red, np.zeros_like(red), (255 - red.astype(np.int64)).astype(np.uint8)], axis=1)
    return HeatmapCloud(np.asarray(pts, dtype=np.float64), d, colors)
