"""Cloud-to-cloud alignment: exact nearest neighbors, Umeyama, PCA init, ICP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import LabeledPointCloud, Pose, SimilarityTransform, matrix_to_quat

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """Alignment could not proceed (degenerate data or lost correspondences)."""


class NearestNeighborIndex:
    """Exact nearest-neighbor queries over an immutable 3D point set.

    Distances are recomputed as ``sqrt(sum((p - q)**2))`` in float64 so
    results are bit-identical to a brute-force scan, and exact ties are
    broken toward the lowest point index. Immutable after construction;
    concurrent queries are safe.
    """

    def __init__(self, points: np.ndarray):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, workers: int = -1):
        """Nearest indices and distances for (M, 3) query points."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k, workers=workers)
        if k == 1:
            idx = idx.reshape(-1, 1)
        d_exact = np.sqrt(((self.points[idx] - q[:, None, :]) ** 2).sum(axis=2))
        if k == 2:
            # Prefer the second candidate when it is strictly closer under
            # the canonical arithmetic, or equally close with a lower index.
            swap = (d_exact[:, 1] < d_exact[:, 0]) | (
                (d_exact[:, 1] == d_exact[:, 0]) & (idx[:, 1] < idx[:, 0]))
            best_idx = np.where(swap, idx[:, 1], idx[:, 0])
            best_d = np.where(swap, d_exact[:, 1], d_exact[:, 0])
            ties = d_exact[:, 1] == d_exact[:, 0]
        else:
            best_idx = idx[:, 0]
            best_d = d_exact[:, 0]
            ties = np.zeros(len(q), dtype=bool)
        for i in np.nonzero(ties)[0]:
            # Exact ties may extend beyond two candidates; resolve by scan
            # over the tie ball so the lowest index always wins.
            cand = self._tree.query_ball_point(q[i], best_d[i] * (1.0 + 1e-12) + 1e-300)
            cand = np.asarray(cand, dtype=np.int64)
            dc = np.sqrt(((self.points[cand] - q[i]) ** 2).sum(axis=1))
            winners = cand[dc == dc.min()]
            if dc.min() <= best_d[i]:
                best_idx[i] = winners.min()
                best_d[i] = dc.min()
        return best_idx, best_d

    def nearest(self, point):
        """(index, distance) of the nearest indexed point to one query."""
        idx, dist = self.query(np.asarray(point, dtype=np.float64).reshape(1, 3), workers=1)
        return int(idx[0]), float(dist[0])


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src`` onto ``dst``.

    Minimizes ``sum ||s*R@src_i + t - dst_i||^2`` via the SVD closed form
    with reflection correction. With ``with_scale`` off the scale is
    exactly 1. Raises :class:`RegistrationError` for fewer than 3 points
    or a collinear/degenerate configuration.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point lists must have equal length")
    if len(src) < 3:
        raise RegistrationError(f"need at least 3 correspondences, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_d
    cov = dst_c.T @ src_c / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= max(1e-12 * D[0], 1e-300):
        raise RegistrationError("degenerate correspondence set (rank < 2 covariance)")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    if with_scale:
        var_s = (src_c ** 2).sum(axis=1).mean()
        s = float((D * S).sum() / var_s)
        if s <= 0:
            raise RegistrationError("non-positive scale estimate")
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return SimilarityTransform(s, matrix_to_quat(R), t)


def _principal_axes(points: np.ndarray):
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return evals, evecs


# Proper-rotation sign assignments for matched principal axes.
_AXIS_SIGNS = (
    (1.0, 1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
)

_PCA_EVAL_CAP = 20_000
# Transverse eigenvalue ratio below which the secondary axes carry no
# usable direction and the roll angle is swept instead.
_DEGENERATE_RATIO = 1.15
_SWEEP_COARSE_DEG = 15.0
_SWEEP_FINE_DEG = 1.0


def _roll_matrix(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def pca_align(src: LabeledPointCloud, dst: LabeledPointCloud,
              with_scale: bool = True) -> SimilarityTransform:
    """Coarse alignment from centroids, RMS radii and principal axes.

    Candidate rotations are scored by a one-pass nearest-neighbor RMS on
    a deterministic subsample and the best one is returned. For clearly
    anisotropic clouds the candidates are the four proper sign
    assignments of the matched principal axes. When the two transverse
    eigenvalues are nearly equal (elongated, roughly rotation-symmetric
    shapes) the secondary axes are numerically meaningless, so the roll
    angle about the primary axis is swept coarse-to-fine as well; the
    exact sign candidates stay in the pool, so exact-copy clouds still
    align exactly.
    """
    src_pts = src.points if isinstance(src, LabeledPointCloud) else np.asarray(src, dtype=np.float64)
    dst_pts = dst.points if isinstance(dst, LabeledPointCloud) else np.asarray(dst, dtype=np.float64)
    if len(src_pts) < 10 or len(dst_pts) < 10:
        raise RegistrationError("PCA alignment needs at least 10 points per cloud")
    evals_s, axes_s = _principal_axes(src_pts)
    evals_d, axes_d = _principal_axes(dst_pts)
    if evals_s[1] <= 1e-12 * max(evals_s[0], 1.0) or evals_d[1] <= 1e-12 * max(evals_d[0], 1.0):
        raise RegistrationError(
            "degenerate covariance; provide a manual initial transform")

    mu_s = src_pts.mean(axis=0)
    mu_d = dst_pts.mean(axis=0)
    if with_scale:
        rms_s = np.sqrt(((src_pts - mu_s) ** 2).sum(axis=1).mean())
        rms_d = np.sqrt(((dst_pts - mu_d) ** 2).sum(axis=1).mean())
        scale = float(rms_d / rms_s)
    else:
        scale = 1.0

    eval_src = src_pts
    if len(eval_src) > _PCA_EVAL_CAP:
        step = int(np.ceil(len(eval_src) / _PCA_EVAL_CAP))
        eval_src = eval_src[::step]
    index = NearestNeighborIndex(dst_pts)

    def score(R: np.ndarray):
        t = mu_d - scale * (R @ mu_s)
        candidate = SimilarityTransform(scale, matrix_to_quat(R), t)
        _, dists = index.query(candidate.apply(eval_src))
        return float(np.sqrt((dists ** 2).mean())), candidate

    best = None
    best_rms = np.inf
    for signs in _AXIS_SIGNS:
        rms, candidate = score(axes_d @ np.diag(signs) @ axes_s.T)
        logger.debug("pca_align signs=%s rms=%.6f", signs, rms)
        if rms < best_rms:
            best_rms, best = rms, candidate

    degenerate = (evals_s[1] < _DEGENERATE_RATIO * evals_s[2]
                  or evals_d[1] < _DEGENERATE_RATIO * evals_d[2])
    if degenerate:
        flips = (np.diag([1.0, 1.0, 1.0]), np.diag([-1.0, 1.0, -1.0]))
        best_roll = 0.0
        best_flip = flips[0]
        for flip in flips:
            for deg in np.arange(0.0, 360.0, _SWEEP_COARSE_DEG):
                R = axes_d @ _roll_matrix(np.radians(deg)) @ flip @ axes_s.T
                rms, candidate = score(R)
                if rms < best_rms:
                    best_rms, best = rms, candidate
                    best_roll, best_flip = deg, flip
        lo = best_roll - _SWEEP_COARSE_DEG
        hi = best_roll + _SWEEP_COARSE_DEG
        for deg in np.arange(lo, hi + _SWEEP_FINE_DEG / 2, _SWEEP_FINE_DEG):
            R = axes_d @ _roll_matrix(np.radians(deg)) @ best_flip @ axes_s.T
            rms, candidate = score(R)
            if rms < best_rms:
                best_rms, best = rms, candidate
        logger.debug("pca_align roll sweep best rms=%.6f", best_rms)
    return best


@dataclass(frozen=True)
class IcpParams:
    """Trimmed point-to-point ICP settings."""

    max_iterations: int = 60
    rel_tol: float = 1e-7
    max_corr_dist: float = 10.0  # mm
    trim_fraction: float = 0.2
    with_scale: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 <= self.trim_fraction < 1:
            raise ValueError("trim_fraction must be in [0, 1)")
        if self.max_corr_dist <= 0:
            raise ValueError("max_corr_dist must be positive")


@dataclass
class IcpResult:
    transform: SimilarityTransform
    rms: float
    iterations: int
    converged: bool
    rms_history: list = field(default_factory=list)
    correspondences: int = 0


def icp(src, dst, init: SimilarityTransform | None = None,
        params: IcpParams = IcpParams()) -> IcpResult:
    """Trimmed point-to-point ICP aligning ``src`` onto ``dst``.

    Each iteration matches transformed source points to their nearest
    destination points, rejects matches beyond ``max_corr_dist``, drops
    the worst ``trim_fraction`` of the rest, and re-solves the similarity
    from the original source points. The returned transform maps the
    original source cloud into the destination frame.

    Raises :class:`RegistrationError` if fewer than 3 correspondences
    survive at any iteration.
    """
    src_pts = src.points if isinstance(src, LabeledPointCloud) else np.asarray(src, dtype=np.float64)
    dst_pts = dst.points if isinstance(dst, LabeledPointCloud) else np.asarray(dst, dtype=np.float64)
    if len(src_pts) == 0 or len(dst_pts) == 0:
        raise RegistrationError("both clouds must be nonempty")
    transform = init if init is not None else SimilarityTransform.identity()
    index = NearestNeighborIndex(dst_pts)

    rms_history: list[float] = []
    prev_rms = None
    converged = False
    n_kept = 0
    iteration = 0
    for iteration in range(1, params.max_iterations + 1):
        moved = transform.apply(src_pts)
        nn_idx, nn_dist = index.query(moved)
        in_range = nn_dist <= params.max_corr_dist
        n_in_range = int(np.count_nonzero(in_range))
        n_kept = n_in_range - int(np.floor(params.trim_fraction * n_in_range))
        if n_kept < 3:
            raise RegistrationError(
                f"ICP iteration {iteration}: only {n_in_range} of {len(src_pts)} "
                f"points within {params.max_corr_dist} mm ({n_kept} after trim)")
        cand = np.nonzero(in_range)[0]
        order = np.argsort(nn_dist[cand], kind="stable")
        keep = cand[order[:n_kept]]

        transform = umeyama(src_pts[keep], dst_pts[nn_idx[keep]],
                            with_scale=params.with_scale)
        residual = transform.apply(src_pts[keep]) - dst_pts[nn_idx[keep]]
        rms = float(np.sqrt((residual ** 2).sum(axis=1).mean()))
        rms_history.append(rms)
        logger.debug("icp iteration %d: rms=%.9f kept=%d", iteration, rms, n_kept)

        if prev_rms is not None:
            if rms < 1e-15 or abs(prev_rms - rms) / max(rms, 1e-300) < params.rel_tol:
                converged = True
                break
        elif rms < 1e-15:
            converged = True
            break
        prev_rms = rms

    return IcpResult(transform=transform, rms=rms_history[-1], iterations=iteration,
                     converged=converged, rms_history=rms_history,
                     correspondences=n_kept)


def register_clouds(src: LabeledPointCloud, dst: LabeledPointCloud,
                    init: SimilarityTransform | None = None,
                    params: IcpParams = IcpParams(),
                    prealign_voxel: float = 0.7) -> IcpResult:
    """Full registration recipe: coarse alignment, then trimmed ICP.

    Both clouds are voxel-downsampled (``prealign_voxel`` mm, 0 disables)
    before alignment: the equalized densities make the PCA axes reflect
    geometry rather than viewpoint-dependent sampling, and ICP cost stops
    scaling with reconstruction resolution. The solved transform applies
    to the original source cloud; reported RMS is over the downsampled
    correspondences.
    """
    from .fusion import voxel_downsample  # fusion does not import back

    src_solve, dst_solve = src, dst
    if prealign_voxel > 0:
        src_solve = voxel_downsample(src, prealign_voxel)
        dst_solve = voxel_downsample(dst, prealign_voxel)
        if len(src_solve) < 10 or len(dst_solve) < 10:
            src_solve, dst_solve = src, dst
    if init is None:
        init = pca_align(src_solve, dst_solve, with_scale=params.with_scale)
    return icp(src_solve, dst_solve, init, params)
