"""Sparse map model: registered images, 3D points with tracks, co-visibility.

A SparseMap is immutable after construction; the co-visibility graph is
built lazily on first access and cached (idempotent, safe under concurrent
first access since the finished dict is assigned atomically).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UnknownImage
from .geometry import PinholeCamera, RigidPose

__all__ = ["MapPoint", "RegisteredImage", "SparseMap", "covisibility"]


@dataclass
class MapPoint:
    """A triangulated 3D point with its observation track.

    `track` lists (image id, keypoint index) observations. `rgb` and
    `error` mirror the COLMAP text columns so models round-trip; the
    uncertainty fields are filled by map refinement.
    """

    position: np.ndarray
    track: list = field(default_factory=list)
    rgb: tuple = (0, 0, 0)
    error: float = -1.0
    covariance: Optional[np.ndarray] = None
    uncertainty_sigma: Optional[float] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
            if not np.allclose(cov, cov.T, atol=1e-9):
                raise ValueError("covariance must be symmetric")
            self.covariance = cov


@dataclass
class RegisteredImage:
    """A database image registered in the map.

    `observed_points` maps keypoint index -> map point id and must be
    injective (no two keypoints observe the same point). `keypoints2d`
    optionally carries the per-keypoint pixel coordinates as stored in
    COLMAP text models.
    """

    id: int
    name: str
    camera_id: int
    pose: RigidPose
    observed_points: dict = field(default_factory=dict)
    keypoints2d: Optional[np.ndarray] = None
    timestamp: Optional[float] = None

    def __post_init__(self):
        ids = list(self.observed_points.values())
        if len(ids) != len(set(ids)):
            raise ValueError(
                f"image {self.id}: multiple keypoints observe the same point"
            )
        if self.keypoints2d is not None:
            self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64).reshape(-1, 2)
            if self.observed_points and max(self.observed_points) >= len(self.keypoints2d):
                raise ValueError(f"image {self.id}: observed keypoint index out of range")


class SparseMap:
    """Cameras, posed images and 3D points with tracks."""

    def __init__(self, cameras: dict, images: dict, points: dict):
        self._cameras = dict(cameras)
        self._images = dict(images)
        self._points = dict(points)
        self._covis = None
        self._validate()

    def _validate(self):
        for img in self._images.values():
            if img.camera_id not in self._cameras:
                raise ValueError(f"image {img.id} references unknown camera {img.camera_id}")
        for pid, pt in self._points.items():
            for image_id, kp_idx in pt.track:
                img = self._images.get(image_id)
                if img is None:
                    raise ValueError(f"point {pid} tracked in unknown image {image_id}")
                if img.observed_points.get(kp_idx) != pid:
                    raise ValueError(
                        f"point {pid}: image {image_id} keypoint {kp_idx} "
                        "does not observe it back"
                    )

    @property
    def cameras(self):
        return self._cameras

    @property
    def images(self):
        return self._images

    @property
    def points(self):
        return self._points

    def camera_of(self, image_id: int) -> PinholeCamera:
        return self._cameras[self._images[image_id].camera_id]

    def observed_point_ids(self, image_id: int) -> set:
        if image_id not in self._images:
            raise UnknownImage(f"image id {image_id} not in map")
        return set(self._images[image_id].observed_points.values())

    def image_centers(self):
        """(ids, (N, 3) camera centers) in a fixed id order."""
        ids = sorted(self._images)
        centers = np.array([self._images[i].pose.center for i in ids])
        return ids, centers

    def diameter(self) -> float:
        """Bounding-box diagonal over points and camera centers."""
        pts = [p.position for p in self._points.values()]
        pts += [img.pose.center for img in self._images.values()]
        if not pts:
            return 0.0
        arr = np.array(pts)
        return float(np.linalg.norm(arr.max(axis=0) - arr.min(axis=0)))

    @property
    def covisibility_graph(self):
        """Dict {(i, j): shared point count} with i < j, exact counts."""
        graph = self._covis
        if graph is None:
            graph = {}
            for pt in self._points.values():
                ids = sorted({image_id for image_id, _ in pt.track})
                for a in range(len(ids)):
                    for b in range(a + 1, len(ids)):
                        key = (ids[a], ids[b])
                        graph[key] = graph.get(key, 0) + 1
            self._covis = graph
        return graph

    def with_points(self, points: dict) -> "SparseMap":
        """New map with the given point subset; image observations pruned."""
        images = {}
        for img in self._images.values():
            obs = {k: v for k, v in img.observed_points.items() if v in points}
            images[img.id] = RegisteredImage(
                id=img.id, name=img.name, camera_id=img.camera_id,
                pose=img.pose, observed_points=obs,
                keypoints2d=img.keypoints2d, timestamp=img.timestamp,
            )
        return SparseMap(self._cameras, images, points)


def covisibility(sparse_map: SparseMap, i: int, j: int) -> int:
    """Number of 3D points observed by both images (symmetric)."""
    if i not in sparse_map.images:
        raise UnknownImage(f"image id {i} not in map")
    if j not in sparse_map.images:
        raise UnknownImage(f"image id {j} not in map")
    if i == j:
        return len(sparse_map.observed_point_ids(i))
    key = (i, j) if i < j else (j, i)
    return sparse_map.covisibility_graph.get(key, 0)
