"""Mapping stage: pair retrieval, triangulation and uncertainty-driven
map refinement.

Per-point uncertainty comes from first-order propagation of pixel
observation noise (identity pixel covariance) through the projection
Jacobian: each observation contributes J^T J to the point's information
matrix, and the per-axis standard deviations are the square roots of the
eigenvalues of its inverse. Points whose largest axis exceeds a threshold
(or whose information is rank deficient) are dropped from the map.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CheiralityViolation, DegenerateGeometry, EmptyIndex,
                     MissingTimestamps, NoValidObservation)
from .geometry import PinholeCamera, RigidPose, project
from .retrieval import DescriptorIndex, retrieve
from .scene import SparseMap

__all__ = [
    "PairList",
    "pairs_by_pose",
    "pairs_by_covisibility",
    "pairs_by_global",
    "pairs_by_sequence",
    "triangulate",
    "observation_jacobian",
    "PointUncertainty",
    "point_information",
    "RejectionReport",
    "refine_map",
]

RANK_DEFICIENT_RATIO = 1e-10


@dataclass
class PairList:
    """Ordered image pairs (i < j) with a per-pair source tag."""

    pairs: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.pairs) != len(self.sources):
            raise ValueError("pair/source counts differ")
        seen = set()
        for i, j in self.pairs:
            if i >= j:
                raise ValueError(f"pair ({i}, {j}) is not ordered i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate pair ({i}, {j})")
            seen.add((i, j))

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def pair_set(self):
        return set(map(tuple, self.pairs))

    def union(self, other: "PairList") -> "PairList":
        """Merge keeping the first source tag for duplicated pairs."""
        pairs = list(map(tuple, self.pairs))
        sources = list(self.sources)
        have = set(pairs)
        for pair, src in zip(other.pairs, other.sources):
            pair = tuple(pair)
            if pair not in have:
                pairs.append(pair)
                sources.append(src)
                have.add(pair)
        return PairList(pairs, sources)


def _sorted_pairlist(pair_set, tag):
    pairs = sorted(pair_set)
    return PairList(pairs, [tag] * len(pairs))


def pairs_by_pose(sparse_map: SparseMap, k: int, radius: float) -> PairList:
    """Each image paired with its k nearest camera centers strictly inside
    `radius`; symmetric duplicates removed."""
    ids, centers = sparse_map.image_centers()
    n = len(ids)
    out = set()
    if n < 2 or k <= 0:
        return _sorted_pairlist(out, "POSE")
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    r2 = radius * radius
    for a in range(n):
        order = np.argsort(d2[a], kind="stable")[:k]
        for b in order:
            if d2[a, b] < r2:
                out.add((min(ids[a], ids[b]), max(ids[a], ids[b])))
    return _sorted_pairlist(out, "POSE")


def pairs_by_covisibility(sparse_map: SparseMap, min_shared: int) -> PairList:
    """All image pairs sharing at least `min_shared` tracked points.

    A threshold of zero returns every (posed) image pair."""
    ids = sorted(sparse_map.images)
    if min_shared <= 0:
        out = {(ids[a], ids[b]) for a in range(len(ids))
               for b in range(a + 1, len(ids))}
        return _sorted_pairlist(out, "COVIS")
    out = {pair for pair, count in sparse_map.covisibility_graph.items()
           if count >= min_shared}
    return _sorted_pairlist(out, "COVIS")


def pairs_by_global(descriptors: dict, m: int) -> PairList:
    """Pairs from per-image global-descriptor retrieval (top m, self excluded)."""
    if not descriptors:
        raise EmptyIndex("no global descriptors")
    index = DescriptorIndex(descriptors)
    out = set()
    for i in index.ids:
        for j in retrieve(descriptors[i], index, m, exclude={i}):
            out.add((min(i, j), max(i, j)))
    return _sorted_pairlist(out, "GLOBAL")


def pairs_by_sequence(sparse_map: SparseMap, window: int) -> PairList:
    """Each image paired with the `window` images before/after in
    timestamp order."""
    images = list(sparse_map.images.values())
    missing = [img.id for img in images if img.timestamp is None]
    if missing:
        raise MissingTimestamps(f"images without timestamps: {sorted(missing)}")
    ordered = sorted(images, key=lambda im: (im.timestamp, im.id))
    out = set()
    for a in range(len(ordered)):
        for b in range(a + 1, min(a + 1 + window, len(ordered))):
            i, j = ordered[a].id, ordered[b].id
            out.add((min(i, j), max(i, j)))
    return _sorted_pairlist(out, "TEMPORAL")


# ---------------------------------------------------------------------------
# triangulation


def triangulate(observations):
    """Linear (DLT) triangulation of one point from >= 2 observations.

    `observations` is a list of (camera, pose, pixel) with undistorted
    pixels. Returns (point_w, residuals). Raises DegenerateGeometry when
    all rays are parallel or all camera centers coincide, and
    CheiralityViolation when the solution lands behind any camera.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    rays = []
    centers = []
    rows = []
    for cam, pose, pixel in observations:
        rot = pose.rotation_matrix
        p_mat = cam.K @ np.hstack([rot, pose.t.reshape(3, 1)])
        u, v = float(pixel[0]), float(pixel[1])
        rows.append(u * p_mat[2] - p_mat[0])
        rows.append(v * p_mat[2] - p_mat[1])
        d = rot.T @ np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        rays.append(d / np.linalg.norm(d))
        centers.append(pose.center)
    rays = np.array(rays)
    centers = np.array(centers)

    baseline = 0.0
    parallel = True
    for a in range(len(rays)):
        for b in range(a + 1, len(rays)):
            baseline = max(baseline, float(np.linalg.norm(centers[a] - centers[b])))
            if np.linalg.norm(np.cross(rays[a], rays[b])) > 1e-8:
                parallel = False
    scale = max(1.0, float(np.max(np.abs(centers))))
    if baseline <= 1e-12 * scale:
        raise DegenerateGeometry("camera centers coincide (zero baseline)")
    if parallel:
        raise DegenerateGeometry("observation rays are parallel")

    a_mat = np.array(rows)
    _, _, vt = np.linalg.svd(a_mat)
    hom = vt[-1]
    if abs(hom[3]) < 1e-12 * np.linalg.norm(hom[:3]):
        raise DegenerateGeometry("triangulated point at infinity")
    point = hom[:3] / hom[3]

    residuals = []
    for cam, pose, pixel in observations:
        proj = project(cam, pose, point)  # raises CheiralityViolation
        residuals.append(float(np.linalg.norm(proj - np.asarray(pixel, float))))
    return point, residuals


# ---------------------------------------------------------------------------
# observation Jacobian and point uncertainty


def observation_jacobian(cam: PinholeCamera, pose: RigidPose, p_w) -> np.ndarray:
    """2x3 derivative of the (undistorted) pixel observation w.r.t. the
    world point: [[fx/z, 0, -x fx/z^2], [0, fy/z, -y fy/z^2]] . R."""
    pc = pose.apply(np.asarray(p_w, dtype=np.float64).reshape(3))
    x, y, z = pc
    if z <= 0:
        raise CheiralityViolation(f"point behind camera (z_c = {z:.6g})")
    front = np.array([
        [cam.fx / z, 0.0, -x * cam.fx / (z * z)],
        [0.0, cam.fy / z, -y * cam.fy / (z * z)],
    ])
    return front @ pose.rotation_matrix


@dataclass
class PointUncertainty:
    """Information matrix of a point plus its per-axis sigmas.

    `sigma_axes` are descending standard deviations along the eigen
    directions of the covariance; rank-deficient information yields
    infinite sigmas and sets `degenerate`.
    """

    information: np.ndarray
    sigma_axes: np.ndarray
    degenerate: bool

    @property
    def sigma_max(self) -> float:
        return float(self.sigma_axes[0])

    @property
    def covariance(self):
        if self.degenerate:
            return None
        return np.linalg.inv(self.information)


def point_information(point_w, views, weights=None) -> PointUncertainty:
    """Accumulate J^T J over the observing views (identity pixel noise).

    `views` is a list of (camera, pose); observations behind a camera are
    skipped. `weights` optionally scales each observation's contribution.
    """
    point_w = np.asarray(point_w, dtype=np.float64).reshape(3)
    if weights is None:
        weights = [1.0] * len(views)
    info = np.zeros((3, 3))
    valid = 0
    for (cam, pose), wgt in zip(views, weights):
        try:
            jac = observation_jacobian(cam, pose, point_w)
        except CheiralityViolation:
            continue
        info += wgt * (jac.T @ jac)
        valid += 1
    if valid == 0:
        raise NoValidObservation("no observation sees the point from the front")
    info = 0.5 * (info + info.T)
    eigvals = np.linalg.eigvalsh(info)  # ascending
    max_eig = float(eigvals[-1])
    floor = RANK_DEFICIENT_RATIO * max(max_eig, 1e-300)
    sigma = np.where(eigvals > floor, 1.0 / np.sqrt(np.maximum(eigvals, floor)),
                     math.inf)
    degenerate = max_eig <= 0 or bool(eigvals[0] <= floor)
    # eigvals ascend, so sigmas already descend
    return PointUncertainty(information=info, sigma_axes=sigma,
                            degenerate=degenerate)


@dataclass
class RejectionReport:
    """Per-point refinement decisions plus summary counts."""

    threshold: float
    entries: list  # (point id, sigma_max, decision)
    kept: int
    rejected: int

    def to_text(self):
        lines = [f"{pid} {sigma:.6g} {decision}" for pid, sigma, decision in self.entries]
        lines.append(f"# kept {self.kept} rejected {self.rejected} "
                     f"threshold {self.threshold:.6g}")
        return "\n".join(lines) + "\n"


def _point_sigma(sparse_map, point):
    views = []
    for image_id, _ in point.track:
        img = sparse_map.images[image_id]
        views.append((sparse_map.cameras[img.camera_id], img.pose))
    try:
        unc = point_information(point.position, views)
    except NoValidObservation:
        return math.inf, None
    return (math.inf if unc.degenerate else unc.sigma_max), unc


def refine_map(sparse_map: SparseMap, sigma_threshold: float = None,
               sigma_mult: float = 3.0, min_track: int = 2):
    """Drop points whose largest-axis sigma exceeds the threshold, whose
    information is rank deficient, or whose track is shorter than
    `min_track`.

    Without an absolute `sigma_threshold`, the threshold is `sigma_mult`
    times the median finite sigma. Returns (refined map, RejectionReport).
    Idempotent at a fixed absolute threshold.
    """
    sigmas = {}
    uncertainties = {}
    for pid, pt in sorted(sparse_map.points.items()):
        sigma, unc = _point_sigma(sparse_map, pt)
        sigmas[pid] = sigma
        uncertainties[pid] = unc
    if sigma_threshold is None:
        finite = [s for s in sigmas.values() if math.isfinite(s)]
        sigma_threshold = sigma_mult * float(np.median(finite)) if finite else 0.0
    if sigma_threshold < 0:
        raise ValueError("sigma threshold must be positive")

    entries = []
    kept_points = {}
    for pid, pt in sorted(sparse_map.points.items()):
        sigma = sigmas[pid]
        if len(pt.track) < min_track:
            decision = "reject_track"
        elif not math.isfinite(sigma):
            decision = "reject_degenerate"
        elif sigma > sigma_threshold:
            decision = "reject_sigma"
        else:
            decision = "keep"
        entries.append((pid, sigma, decision))
        if decision == "keep":
            unc = uncertainties[pid]
            kept_points[pid] = type(pt)(
                position=pt.position, track=list(pt.track), rgb=pt.rgb,
                error=pt.error,
                covariance=None if unc is None else unc.covariance,
                uncertainty_sigma=sigma,
            )
    report = RejectionReport(
        threshold=float(sigma_threshold), entries=entries,
        kept=len(kept_points), rejected=len(entries) - len(kept_points),
    )
    return sparse_map.with_points(kept_points), report
