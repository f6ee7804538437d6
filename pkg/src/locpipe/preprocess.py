"""Deterministic image pre-processing.

Covers the resizing rule (long side capped at 1600 px, dimensions cropped
to multiples of 8), removal of keypoints under an exclusion mask or inside
a fixed bottom occluder band, and iterative undistortion of keypoint
coordinates. All operations are pure.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ImageTooSmall, NoConvergence
from .features import LocalFeatureSet
from .geometry import PinholeCamera, distort_normalized

__all__ = [
    "ResizePlan",
    "plan_resize",
    "MaskImage",
    "apply_mask",
    "undistort_keypoints",
]

LONG_SIDE = 1600
ROUND_TO = 8


@dataclass(frozen=True)
class ResizePlan:
    scale: float
    width: int      # output width after crop, multiple of 8
    height: int     # output height after crop, multiple of 8
    crop_right: int
    crop_bottom: int

    @property
    def scaled_size(self):
        """Size right after aspect-preserving scaling, before the crop."""
        return self.width + self.crop_right, self.height + self.crop_bottom


def plan_resize(width: int, height: int) -> ResizePlan:
    """Resize plan: scale so the larger side is 1600 (never upscale),
    then crop right/bottom to make both dimensions multiples of 8."""
    if width < ROUND_TO or height < ROUND_TO:
        raise ImageTooSmall(f"{width}x{height} is below {ROUND_TO}px")
    long_side = max(width, height)
    if long_side >= LONG_SIDE:
        scale = LONG_SIDE / long_side
        if width >= height:
            sw, sh = LONG_SIDE, int(round(height * scale))
        else:
            sw, sh = int(round(width * scale)), LONG_SIDE
    else:
        scale = 1.0
        sw, sh = width, height
    out_w = sw - sw % ROUND_TO
    out_h = sh - sh % ROUND_TO
    if out_w == 0 or out_h == 0:
        raise ImageTooSmall(f"{width}x{height} collapses below {ROUND_TO}px after scaling")
    return ResizePlan(scale=scale, width=out_w, height=out_h,
                      crop_right=sw - out_w, crop_bottom=sh - out_h)


@dataclass(frozen=True)
class MaskImage:
    """Boolean exclusion mask; True marks pixels whose keypoints are dropped."""

    excluded: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.excluded)
        if arr.ndim != 2:
            raise ValueError("mask must be a 2D array")
        object.__setattr__(self, "excluded", arr.astype(bool))

    @property
    def width(self):
        return self.excluded.shape[1]

    @property
    def height(self):
        return self.excluded.shape[0]

    @classmethod
    def from_grayscale(cls, image) -> "MaskImage":
        """Nonzero pixels are excluded regions."""
        return cls(np.asarray(image) != 0)


def apply_mask(features: LocalFeatureSet, mask: MaskImage,
               bottom_band_fraction: float = 0.0) -> LocalFeatureSet:
    """Drop keypoints on masked pixels or inside the bottom band.

    Keypoint order and descriptor-row alignment are preserved for the
    survivors. Keypoints outside the mask raster indicate a frame
    mismatch and raise DimensionMismatch.
    """
    if not 0.0 <= bottom_band_fraction <= 1.0:
        raise ValueError("bottom_band_fraction must be within [0, 1]")
    if len(features) == 0:
        return features
    xy = features.keypoints[:, :2]
    col = np.floor(xy[:, 0]).astype(int)
    row = np.floor(xy[:, 1]).astype(int)
    out_of_frame = (col < 0) | (col >= mask.width) | (row < 0) | (row >= mask.height)
    if np.any(out_of_frame):
        raise DimensionMismatch(
            f"{int(out_of_frame.sum())} keypoints fall outside the "
            f"{mask.width}x{mask.height} mask raster"
        )
    drop = mask.excluded[row, col]
    if bottom_band_fraction > 0.0:
        band_top = mask.height * (1.0 - bottom_band_fraction)
        drop = drop | (xy[:, 1] >= band_top)
    return features.select(~drop)


def undistort_keypoints(cam: PinholeCamera, pts, max_iters: int = 100,
                        tol: float = 1e-8):
    """Invert the lens distortion of pixel coordinates.

    Fixed-point iteration in normalized coordinates. Points whose final
    update step exceeds `tol` (normalized units) raise NoConvergence with
    the offending indices. Zero coefficients return the input unchanged.
    The default iteration cap covers strong barrel distortion at image
    corners, where the fixed-point contraction factor approaches 0.8.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.size == 0:
        return pts.reshape(0, 2)
    if not cam.has_distortion:
        return pts.copy()
    k1, k2, p1, p2 = cam.distortion
    xd = (pts[:, 0] - cam.cx) / cam.fx
    yd = (pts[:, 1] - cam.cy) / cam.fy
    x, y = xd.copy(), yd.copy()
    step = np.full(len(x), np.inf)
    for _ in range(max_iters):
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        step = np.hypot(x_new - x, y_new - y)
        x, y = x_new, y_new
        if np.max(step) < 1e-14:
            break
    bad = np.nonzero(~(step < tol))[0]
    if bad.size:
        raise NoConvergence(
            f"undistortion did not converge for {bad.size} points", indices=bad
        )
    out = np.column_stack([cam.fx * x + cam.cx, cam.fy * y + cam.cy])
    # sanity: the forward model must reproduce the inputs
    fwd = distort_normalized(cam, np.column_stack([x, y]))
    res = np.hypot(cam.fx * fwd[:, 0] + cam.cx - pts[:, 0],
                   cam.fy * fwd[:, 1] + cam.cy - pts[:, 1])
    bad = np.nonzero(res > tol * max(cam.fx, cam.fy))[0]
    if bad.size:
        raise NoConvergence(
            f"round-trip residual above tolerance for {bad.size} points",
            indices=bad,
        )
    return out
