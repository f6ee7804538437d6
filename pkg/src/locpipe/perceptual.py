"""Perceptual distance between views and warp-based cluster reranking.

The distance sums, over encoder layers, the mean per-pixel squared L2
difference of channel-unit-normalized feature maps, optionally scaled by
per-layer channel weights. The default encoder is a deterministic
3-level half-resolution pyramid of [intensity, horizontal gradient,
vertical gradient] maps, so the metric is testable without any learned
weights; a learned encoder can be substituted through the same interface
(a callable image -> list of (C, H, W) arrays).

For reranking, each candidate cluster's reference view is forward-warped
through its depth map into the estimated query pose (nearest-neighbour
splat, nearest-depth occlusion); pixels the warp cannot fill are excluded
from the distance sums.
"""

import numpy as np

from . import _accel
from .errors import ShapeMismatch
from .geometry import PinholeCamera, RigidPose, compose

__all__ = [
    "default_encoder",
    "perceptual_distance",
    "warp_to_pose",
    "rerank_clusters_perceptual",
]


def _downsample2(img):
    h, w = img.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    img = img[:h2, :w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def default_encoder(image, levels: int = 3):
    """Feature pyramid: [intensity, d/dx, d/dy] at halving resolutions."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("encoder expects a single-channel image")
    out = []
    cur = img
    for _ in range(levels):
        gy, gx = np.gradient(cur)
        out.append(np.stack([cur, gx, gy]))
        cur = _downsample2(cur)
    return out


def _unit_normalize_channels(feat):
    norms = np.sqrt(np.sum(feat * feat, axis=0, keepdims=True))
    return np.where(norms > 0, feat / np.where(norms > 0, norms, 1.0), 0.0)


def _min_pool2(mask):
    h, w = mask.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    m = mask[:h2, :w2]
    return m[0::2, 0::2] & m[1::2, 0::2] & m[0::2, 1::2] & m[1::2, 1::2]


def mask_pyramid(valid, levels: int):
    """Per-level validity: a coarse pixel is valid iff all its sources are."""
    out = []
    cur = np.asarray(valid, dtype=bool)
    for _ in range(levels):
        out.append(cur)
        cur = _min_pool2(cur)
    return out


def perceptual_distance(pyramid_a, pyramid_b, channel_weights=None,
                        masks=None) -> float:
    """Weighted L2 distance between two feature pyramids.

    `channel_weights` is an optional per-layer list of (C,) vectors
    (all-ones by default). With `masks`, only valid pixels enter each
    layer's sum and the per-layer average is over the valid count.
    """
    if len(pyramid_a) != len(pyramid_b):
        raise ShapeMismatch(
            f"pyramids have {len(pyramid_a)} vs {len(pyramid_b)} layers")
    total = 0.0
    for level, (fa, fb) in enumerate(zip(pyramid_a, pyramid_b)):
        fa = np.asarray(fa, dtype=np.float64)
        fb = np.asarray(fb, dtype=np.float64)
        if fa.shape != fb.shape:
            raise ShapeMismatch(
                f"layer {level}: shapes {fa.shape} vs {fb.shape} differ")
        w = None if channel_weights is None else \
            np.asarray(channel_weights[level], dtype=np.float64).reshape(-1, 1, 1)
        diff = _unit_normalize_channels(fa) - _unit_normalize_channels(fb)
        if w is not None:
            if w.shape[0] != fa.shape[0]:
                raise ShapeMismatch(
                    f"layer {level}: {w.shape[0]} weights for {fa.shape[0]} channels")
            diff = w * diff
        sq = np.sum(diff * diff, axis=0)
        if masks is not None:
            m = np.asarray(masks[level], dtype=bool)
            if m.shape != sq.shape:
                raise ShapeMismatch(
                    f"layer {level}: mask {m.shape} vs feature {sq.shape}")
            count = int(m.sum())
            if count == 0:
                continue
            total += float(sq[m].sum()) / count
        else:
            total += float(sq.mean())
    return total


def warp_to_pose(ref_image, ref_depth, ref_camera: PinholeCamera,
                 ref_pose: RigidPose, dst_camera: PinholeCamera,
                 dst_pose: RigidPose):
    """Forward-warp a reference view into a destination pose via its depth.

    Returns (warped image, valid mask) at the destination camera size.
    """
    ref_image = np.asarray(ref_image, dtype=np.float64)
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    if ref_image.shape != ref_depth.shape:
        raise ShapeMismatch(
            f"image {ref_image.shape} vs depth {ref_depth.shape}")
    rel = compose(dst_pose, ref_pose.inverse())  # ref camera -> dst camera
    return _accel.splat_warp(
        ref_image, ref_depth, rel.rotation_matrix, rel.t,
        ref_camera.fx, ref_camera.fy, ref_camera.cx, ref_camera.cy,
        dst_camera.fx, dst_camera.fy, dst_camera.cx, dst_camera.cy,
        dst_camera.height, dst_camera.width,
    )


def rerank_clusters_perceptual(query_image, query_camera, estimates,
                               image_provider, depth_provider,
                               pose_of, camera_of,
                               encoder=default_encoder,
                               channel_weights=None):
    """Reorder pose estimates by warped-view perceptual distance, ascending.

    Each estimate's reference image (its cluster's strongest member) is
    warped into the estimated pose and compared to the query view.
    Estimates whose reference lacks a depth map keep their incoming
    (inlier-rank) position relative to each other and sort after the
    scored ones. Returns (reordered estimates, {reference id: distance}).
    """
    query_pyr = encoder(np.asarray(query_image, dtype=np.float64))
    levels = len(query_pyr)
    scored = []
    distances = {}
    for rank, est in enumerate(estimates):
        ref = est.reference_image_id
        depth = depth_provider(ref) if ref is not None else None
        image = image_provider(ref) if ref is not None else None
        if depth is None or image is None:
            scored.append((np.inf, rank, est))
            continue
        warped, valid = warp_to_pose(
            image, depth, camera_of(ref), pose_of(ref), query_camera, est.pose)
        dist = perceptual_distance(
            encoder(warped), query_pyr, channel_weights=channel_weights,
            masks=mask_pyramid(valid, levels))
        est.perceptual_distance = dist
        distances[ref] = dist
        scored.append((dist, rank, est))
    scored.sort(key=lambda item: (item[0], item[1]))
    return [est for _, _, est in scored], distances
