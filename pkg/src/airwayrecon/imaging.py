"""Lens distortion models, undistortion remaps, cropping and mask rescaling.

Distorted/undistorted point coordinates here are *normalized* camera
coordinates (x/z, y/z); pixel coordinates only appear at the remap stage.
Masks are (h, w) uint8 arrays with values {0, 1}; grayscale images are
(h, w) float arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    DISTORTION_FISHEYE,
    DISTORTION_NONE,
    DISTORTION_RADTAN,
    CameraIntrinsics,
)

MAX_INVERT_ITERATIONS = 50
INVERT_TOLERANCE = 1e-10


class UndistortionError(RuntimeError):
    """Iterative distortion inversion failed to converge."""

    def __init__(self, message: str, max_residual: float):
        super().__init__(f"{message} (max residual {max_residual:.3e})")
        self.max_residual = max_residual


def _radtan_forward(x, y, coeffs):
    k1, k2, p1, p2, k3 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def _radtan_jacobian(x, y, coeffs):
    k1, k2, p1, p2, k3 = coeffs
    r2 = x * x + y * y
    g = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    # dg/d(r^2)
    gp = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2
    j00 = g + 2.0 * x * x * gp + 2.0 * p1 * y + 6.0 * p2 * x
    j01 = 2.0 * x * y * gp + 2.0 * p1 * x + 2.0 * p2 * y
    j10 = 2.0 * x * y * gp + 2.0 * p1 * x + 2.0 * p2 * y
    j11 = g + 2.0 * y * y * gp + 6.0 * p1 * y + 2.0 * p2 * x
    return j00, j01, j10, j11


def _fisheye_theta_distort(theta, coeffs):
    k1, k2, k3, k4 = coeffs
    t2 = theta * theta
    return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))


def _fisheye_theta_derivative(theta, coeffs):
    k1, k2, k3, k4 = coeffs
    t2 = theta * theta
    return 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))


def distort_point(x, y, model: str, coefficients) -> tuple:
    """Apply the forward distortion model to normalized coordinates.

    Accepts scalars or same-shape arrays; returns distorted normalized
    coordinates of the same shape. The optical axis (0, 0) is a fixed
    point of every model.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite normalized coordinates")
    if model == DISTORTION_NONE:
        return x.copy(), y.copy()
    if model == DISTORTION_RADTAN:
        return _radtan_forward(x, y, coefficients)
    if model == DISTORTION_FISHEYE:
        r = np.hypot(x, y)
        theta = np.arctan(r)
        theta_d = _fisheye_theta_distort(theta, coefficients)
        # theta_d / r -> 1 as r -> 0
        scale = np.where(r > 0, theta_d / np.where(r > 0, r, 1.0), 1.0)
        return x * scale, y * scale
    raise ValueError(f"unknown distortion model {model!r}")


def undistort_point(xd, yd, model: str, coefficients) -> tuple:
    """Invert :func:`distort_point` by Newton iteration.

    Raises :class:`UndistortionError` when any element fails to reach a
    residual of ``INVERT_TOLERANCE`` within ``MAX_INVERT_ITERATIONS``.
    """
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    if not (np.all(np.isfinite(xd)) and np.all(np.isfinite(yd))):
        raise ValueError("non-finite distorted coordinates")
    if model == DISTORTION_NONE:
        return xd.copy(), yd.copy()

    if model == DISTORTION_FISHEYE:
        rd = np.hypot(xd, yd)
        theta = rd.copy()
        converged = rd == 0
        for _ in range(MAX_INVERT_ITERATIONS):
            f = _fisheye_theta_distort(theta, coefficients) - rd
            converged = np.abs(f) < INVERT_TOLERANCE
            if np.all(converged):
                break
            step = f / _fisheye_theta_derivative(theta, coefficients)
            theta = np.where(converged, theta, theta - step)
        residual = np.abs(_fisheye_theta_distort(theta, coefficients) - rd)
        worst = float(np.max(residual)) if residual.size else 0.0
        if worst >= INVERT_TOLERANCE:
            raise UndistortionError("fisheye undistortion did not converge", worst)
        r = np.tan(theta)
        scale = np.where(rd > 0, r / np.where(rd > 0, rd, 1.0), 1.0)
        return xd * scale, yd * scale

    if model == DISTORTION_RADTAN:
        x = xd.copy()
        y = yd.copy()
        for _ in range(MAX_INVERT_ITERATIONS):
            fx_, fy_ = _radtan_forward(x, y, coefficients)
            rx = fx_ - xd
            ry = fy_ - yd
            if np.all(np.maximum(np.abs(rx), np.abs(ry)) < INVERT_TOLERANCE):
                break
            j00, j01, j10, j11 = _radtan_jacobian(x, y, coefficients)
            det = j00 * j11 - j01 * j10
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            x = x - (j11 * rx - j01 * ry) / det
            y = y - (-j10 * rx + j00 * ry) / det
        fx_, fy_ = _radtan_forward(x, y, coefficients)
        residual = np.maximum(np.abs(fx_ - xd), np.abs(fy_ - yd))
        worst = float(np.max(residual)) if residual.size else 0.0
        if worst >= INVERT_TOLERANCE:
            raise UndistortionError("radtan undistortion did not converge", worst)
        return x, y

    raise ValueError(f"unknown distortion model {model!r}")


@dataclass
class PixelMap:
    """Per-output-pixel source sampling coordinates for a remap.

    ``src_x``/``src_y`` are (height, width) float arrays of source pixel
    coordinates; ``valid`` flags entries that land inside the source image.
    """

    width: int
    height: int
    src_x: np.ndarray
    src_y: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        for name in ("src_x", "src_y", "valid"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(self.src_x[self.valid])) or not np.all(
                np.isfinite(self.src_y[self.valid])):
            raise ValueError("valid map entries must be finite")

    @classmethod
    def identity(cls, width: int, height: int) -> "PixelMap":
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(width, height, xs, ys, np.ones((height, width), dtype=bool))


def build_undistort_map(src: CameraIntrinsics, dst: CameraIntrinsics) -> PixelMap:
    """Build the remap that renders a distortion-free ``dst`` view of ``src``.

    For every destination pixel the corresponding source location is found
    by normalizing with ``dst``, pushing through ``src``'s forward
    distortion, and denormalizing with ``src``. Destinations that fall
    outside the source image are flagged invalid rather than failing.
    """
    if dst.distortion_model != DISTORTION_NONE:
        raise ValueError("destination intrinsics must be distortion-free")
    ys, xs = np.mgrid[0:dst.height, 0:dst.width].astype(np.float64)
    xn = (xs - dst.cx) / dst.fx
    yn = (ys - dst.cy) / dst.fy
    xd, yd = distort_point(xn, yn, src.distortion_model, src.coefficients)
    src_x = xd * src.fx + src.cx
    src_y = yd * src.fy + src.cy
    valid = (
        np.isfinite(src_x) & np.isfinite(src_y)
        & (src_x >= 0.0) & (src_x <= src.width - 1.0)
        & (src_y >= 0.0) & (src_y <= src.height - 1.0)
    )
    src_x = np.where(valid, src_x, 0.0)
    src_y = np.where(valid, src_y, 0.0)
    return PixelMap(dst.width, dst.height, src_x, src_y, valid)


def remap_bilinear(image: np.ndarray, pixel_map: PixelMap) -> np.ndarray:
    """Resample a grayscale image through ``pixel_map`` with bilinear weights.

    Invalid map entries produce 0.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = pixel_map.src_x
    y = pixel_map.src_y
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x1]
    bottom = (1.0 - fx) * img[y1, x0] + fx * img[y1, x1]
    out = (1.0 - fy) * top + fy * bottom
    return np.where(pixel_map.valid, out, 0.0)


def remap_nearest(mask: np.ndarray, pixel_map: PixelMap) -> np.ndarray:
    """Resample a binary mask through ``pixel_map`` with round-half-up
    nearest-neighbor sampling. Invalid entries produce 0; output stays
    binary uint8."""
    m = np.asarray(mask)
    h, w = m.shape
    xi = np.clip(np.floor(pixel_map.src_x + 0.5).astype(np.int64), 0, w - 1)
    yi = np.clip(np.floor(pixel_map.src_y + 0.5).astype(np.int64), 0, h - 1)
    out = m[yi, xi].astype(np.uint8)
    out[~pixel_map.valid] = 0
    return out


def crop_intrinsics(k: CameraIntrinsics, crop_w: int, crop_h: int) -> CameraIntrinsics:
    """Intrinsics of a crop window centered on the principal point.

    The window origin is rounded to whole pixels and clamped so it never
    leaves the source image; fx/fy are unchanged and cx/cy shift by the
    window origin.
    """
    if not (0 < crop_w <= k.width and 0 < crop_h <= k.height):
        raise ValueError(
            f"crop {crop_w}x{crop_h} does not fit inside {k.width}x{k.height}")
    ox = int(np.floor(k.cx - crop_w / 2.0 + 0.5))
    oy = int(np.floor(k.cy - crop_h / 2.0 + 0.5))
    ox = min(max(ox, 0), k.width - crop_w)
    oy = min(max(oy, 0), k.height - crop_h)
    return CameraIntrinsics(
        fx=k.fx, fy=k.fy, cx=k.cx - ox, cy=k.cy - oy,
        width=crop_w, height=crop_h,
        distortion_model=k.distortion_model, coefficients=k.coefficients)


def rescale_mask_nearest(mask: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbor mask rescale with pixel-center alignment.

    Source coordinates follow ``src = (dst + 0.5) * scale - 0.5`` per axis,
    rounded half-up, so resizing to the same size is the identity.
    """
    m = np.asarray(mask)
    h, w = m.shape
    if out_w <= 0 or out_h <= 0:
        raise ValueError("output size must be positive")
    if (out_w, out_h) == (w, h):
        return m.astype(np.uint8).copy()
    xs = np.floor((np.arange(out_w) + 0.5) * (w / out_w) - 0.5 + 0.5).astype(np.int64)
    ys = np.floor((np.arange(out_h) + 0.5) * (h / out_h) - 0.5 + 0.5).astype(np.int64)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    return m[np.ix_(ys, xs)].astype(np.uint8)
