"""Query localization: clustering, 2D-3D correspondences, robust PnP.

Candidate database images are grouped into clusters (connected components
of a camera-proximity or co-visibility graph), each cluster is localized
independently by RANSAC over 3-point minimal pose solutions followed by
damped least-squares refinement, and the per-cluster estimates are ranked
by inlier count. Estimating per cluster instead of over the merged
correspondence pool keeps repetitive-structure impostors from
contaminating a single consensus.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _accel
from .errors import NoPoseError, TooFewCorrespondences, UnknownImage
from .features import LocalFeatureSet, MatchSet
from .geometry import PinholeCamera, RigidPose, compose, quat_from_axis_angle
from .pose_refine import kabsch_align
from .scene import SparseMap, covisibility

__all__ = [
    "Correspondence2D3D",
    "CameraCluster",
    "PoseEstimate",
    "cluster_candidates",
    "build_correspondences",
    "p3p_solve",
    "pnp_ransac",
    "localize_clusterwise",
]

PNP_THRESHOLD_PX = 8.0
PNP_MIN_INLIERS = 12
PNP_MAX_ITERS = 1000
PNP_CONFIDENCE = 0.999


@dataclass(frozen=True)
class Correspondence2D3D:
    """One query keypoint matched to one map point via a database image.

    `pixel` is the undistorted query pixel; `point_position` caches the
    map point's world coordinates for the solvers.
    """

    query_kp: int
    pixel: tuple
    point_id: int
    source_image_id: int
    point_position: tuple = None


@dataclass
class CameraCluster:
    """A connected group of candidate database images."""

    cluster_id: int
    members: list
    method: str  # POSE | COVIS


@dataclass
class PoseEstimate:
    """A candidate query pose with its supporting correspondences."""

    pose: RigidPose
    correspondences: list
    inlier_indices: np.ndarray
    cluster_id: int = -1
    mean_reproj_error: float = math.inf
    reference_image_id: Optional[int] = None
    perceptual_distance: Optional[float] = None

    @property
    def inlier_count(self) -> int:
        return len(self.inlier_indices)

    @property
    def inliers(self):
        return [self.correspondences[i] for i in self.inlier_indices]


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def cluster_candidates(sparse_map: SparseMap, candidate_ids, method: str,
                       pose_radius: float = None,
                       covis_threshold: int = None):
    """Partition candidates into connected components.

    POSE links candidates whose camera centers are strictly within
    `pose_radius` (orientation ignored); COVIS links candidates sharing at
    least `covis_threshold` map points. Components are transitive
    closures, so chains merge into one cluster.
    """
    candidates = sorted(set(candidate_ids))
    for i in candidates:
        if i not in sparse_map.images:
            raise UnknownImage(f"candidate image {i} not in map")
    uf = _UnionFind(candidates)
    if method == "POSE":
        if pose_radius is None:
            raise ValueError("POSE clustering needs pose_radius")
        centers = {i: sparse_map.images[i].pose.center for i in candidates}
        r2 = pose_radius * pose_radius
        for a in range(len(candidates)):
            for b in range(a + 1, len(candidates)):
                i, j = candidates[a], candidates[b]
                d = centers[i] - centers[j]
                if float(d @ d) < r2:
                    uf.union(i, j)
    elif method == "COVIS":
        if covis_threshold is None:
            raise ValueError("COVIS clustering needs covis_threshold")
        for a in range(len(candidates)):
            for b in range(a + 1, len(candidates)):
                i, j = candidates[a], candidates[b]
                if covisibility(sparse_map, i, j) >= covis_threshold:
                    uf.union(i, j)
    else:
        raise ValueError(f"unknown clustering method {method!r}")

    groups = {}
    for i in candidates:
        groups.setdefault(uf.find(i), []).append(i)
    clusters = [sorted(members) for members in groups.values()]
    clusters.sort(key=lambda m: m[0])
    return [CameraCluster(cluster_id=k, members=m, method=method)
            for k, m in enumerate(clusters)]


def build_correspondences(query_features: LocalFeatureSet, matches: dict,
                          sparse_map: SparseMap):
    """Lift query<->database matches to 2D-3D correspondences via tracks.

    `matches` maps database image id -> MatchSet (query side A, database
    side B). Database keypoints without a track entry are dropped, and
    duplicate (query keypoint, point) pairs arising from several
    candidates are merged keeping the first source in id order.
    """
    out = []
    seen = set()
    for image_id in sorted(matches):
        match_set: MatchSet = matches[image_id]
        image = sparse_map.images.get(image_id)
        if image is None:
            raise UnknownImage(f"matched image {image_id} not in map")
        for qi, di in match_set.pairs:
            pid = image.observed_points.get(int(di))
            if pid is None:
                continue
            point = sparse_map.points.get(pid)
            if point is None:
                continue
            key = (int(qi), pid)
            if key in seen:
                continue
            seen.add(key)
            x, y = query_features.keypoints[int(qi), :2]
            out.append(Correspondence2D3D(
                query_kp=int(qi), pixel=(float(x), float(y)),
                point_id=pid, source_image_id=image_id,
                point_position=tuple(point.position)))
    return out


# ---------------------------------------------------------------------------
# minimal solver (3-point pose, Grunert's distance quartic)


def p3p_solve(world_pts, bearings):
    """Camera poses fitting 3 world points and unit bearing vectors.

    Returns a list of world-to-camera (R, t) candidates (up to 4).
    Degenerate inputs return an empty list.
    """
    p = np.asarray(world_pts, dtype=np.float64).reshape(3, 3)
    f = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    a2 = float(np.sum((p[1] - p[2]) ** 2))
    b2 = float(np.sum((p[0] - p[2]) ** 2))
    c2 = float(np.sum((p[0] - p[1]) ** 2))
    if min(a2, b2, c2) < 1e-16:
        return []
    ca = float(f[1] @ f[2])
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])

    A = (a2 - c2) / b2
    B = (a2 + c2) / b2
    C = (b2 - c2) / b2
    D = (b2 - a2) / b2
    coeffs = np.array([
        (A - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca,
        4.0 * (A * (1.0 - A) * cb - (1.0 - B) * ca * cg
               + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (A * A - 1.0 + 2.0 * A * A * cb * cb + 2.0 * C * ca * ca
               - 4.0 * B * ca * cb * cg + 2.0 * D * cg * cg),
        4.0 * (-A * (1.0 + A) * cb + 2.0 * a2 / b2 * cg * cg * cb
               - (1.0 - B) * ca * cg),
        (1.0 + A) ** 2 - 4.0 * a2 / b2 * cg * cg,
    ])
    if not np.all(np.isfinite(coeffs)) or np.max(np.abs(coeffs)) < 1e-16:
        return []

    roots = np.roots(coeffs)
    solutions = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = 2.0 * (cg - v * ca)
        if abs(denom) < 1e-12:
            continue
        u = ((-1.0 + A) * v * v - 2.0 * A * cb * v + 1.0 + A) / denom
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        cam_pts = np.array([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        rot, t = kabsch_align(p, cam_pts)
        # reject alignments that do not actually reproduce the distances
        fit = cam_pts - (p @ rot.T + t)
        if np.max(np.abs(fit)) > 1e-4 * max(1.0, s1):
            continue
        solutions.append((rot, t))
    return solutions


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def refine_pose_reprojection(pose: RigidPose, pts3, pts2,
                             cam: PinholeCamera, iters: int = 20) -> RigidPose:
    """Damped Gauss-Newton minimization of reprojection error."""
    pts3 = np.asarray(pts3, dtype=np.float64).reshape(-1, 3)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    lam = 1e-3
    cost_prev = None
    for _ in range(iters):
        pc = pose.apply(pts3)
        z = pc[:, 2]
        front = z > 1e-9
        if front.sum() < 3:
            break
        pcf = pc[front]
        zf = z[front]
        u = cam.fx * pcf[:, 0] / zf + cam.cx
        v = cam.fy * pcf[:, 1] / zf + cam.cy
        res = np.column_stack([u, v]) - pts2[front]
        cost = float(np.sum(res * res))
        if cost_prev is not None and abs(cost_prev - cost) < 1e-14 * max(1.0, cost_prev):
            break
        cost_prev = cost

        n = len(pcf)
        jac = np.zeros((2 * n, 6))
        for i in range(n):
            x, y, zz = pcf[i]
            a = np.array([
                [cam.fx / zz, 0.0, -cam.fx * x / (zz * zz)],
                [0.0, cam.fy / zz, -cam.fy * y / (zz * zz)],
            ])
            jac[2 * i:2 * i + 2, :3] = a @ (-_skew(pcf[i]))
            jac[2 * i:2 * i + 2, 3:] = a
        g = jac.T @ res.reshape(-1)
        h = jac.T @ jac

        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.diag(np.diag(h)) + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                break
            step = RigidPose(quat_from_axis_angle(delta[:3], float(np.linalg.norm(delta[:3])))
                             if np.linalg.norm(delta[:3]) > 0 else np.array([1.0, 0, 0, 0]),
                             delta[3:])
            cand = compose(step, pose)
            pc2 = cand.apply(pts3)
            z2 = pc2[:, 2]
            if np.sum(z2 > 1e-9) < 3:
                lam *= 10.0
                continue
            f2 = z2 > 1e-9
            u2 = cam.fx * pc2[f2, 0] / z2[f2] + cam.cx
            v2 = cam.fy * pc2[f2, 1] / z2[f2] + cam.cy
            r2 = np.column_stack([u2, v2]) - pts2[f2]
            cost2 = float(np.sum(r2 * r2))
            if cost2 < cost:
                pose = cand
                lam = max(lam * 0.3, 1e-9)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
    return pose


def _count_inliers(rot, t, cam, pts3, pts2, threshold):
    err = _accel.reproj_sq_errors(rot, t, cam.fx, cam.fy, cam.cx, cam.cy,
                                  pts3, pts2)
    return err < threshold * threshold, err


def pnp_ransac(correspondences, cam: PinholeCamera,
               threshold_px: float = PNP_THRESHOLD_PX,
               max_iters: int = PNP_MAX_ITERS,
               confidence: float = PNP_CONFIDENCE,
               min_inliers: int = PNP_MIN_INLIERS,
               rng=None) -> Optional[PoseEstimate]:
    """RANSAC over 3-point pose hypotheses with least-squares polish.

    Expects undistorted pixel correspondences. Returns None when the best
    consensus stays below `min_inliers`. The returned inlier set is
    re-checked against the final refined pose.
    """
    corr = list(correspondences)
    if len(corr) < 4:
        raise TooFewCorrespondences(f"PnP needs >= 4 correspondences, got {len(corr)}")
    if any(c.point_position is None for c in corr):
        raise ValueError("correspondences must carry point_position")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    pts3 = np.array([c.point_position for c in corr], dtype=np.float64)
    pts2 = np.array([c.pixel for c in corr], dtype=np.float64)

    bearings = np.column_stack([
        (pts2[:, 0] - cam.cx) / cam.fx,
        (pts2[:, 1] - cam.cy) / cam.fy,
        np.ones(len(corr)),
    ])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    n = len(corr)
    best_mask = None
    best_count = 0
    best_err = np.inf
    best_pose = None
    iters_needed = max_iters
    it = 0
    while it < min(iters_needed, max_iters):
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        for rot, t in p3p_solve(pts3[sample], bearings[sample]):
            mask, err = _count_inliers(rot, t, cam, pts3, pts2, threshold_px)
            count = int(mask.sum())
            if count == 0:
                continue
            mean_err = float(np.sqrt(err[mask]).mean())
            if count > best_count or (count == best_count and mean_err < best_err):
                best_count = count
                best_err = mean_err
                best_mask = mask
                best_pose = RigidPose.from_matrix(rot, t)
                ratio = count / n
                if ratio >= 1.0:
                    iters_needed = it
                else:
                    denom = math.log1p(-(ratio ** 3))
                    if denom < 0:
                        want = math.log(max(1e-12, 1.0 - confidence)) / denom
                        iters_needed = min(max_iters, max(it, int(math.ceil(want))))

    if best_pose is None or best_count < min_inliers:
        return None

    pose = best_pose
    mask = best_mask
    for _ in range(2):
        idx = np.nonzero(mask)[0]
        pose = refine_pose_reprojection(pose, pts3[idx], pts2[idx], cam)
        mask, err = _count_inliers(pose.rotation_matrix, pose.t, cam,
                                   pts3, pts2, threshold_px)
    if int(mask.sum()) < min_inliers:
        return None
    idx = np.nonzero(mask)[0]
    mean_err = float(np.sqrt(err[mask]).mean())
    return PoseEstimate(pose=pose, correspondences=corr,
                        inlier_indices=idx, mean_reproj_error=mean_err)


def localize_clusterwise(clusters, correspondences, cam: PinholeCamera,
                         seed: int = 0, **pnp_kwargs):
    """One robust PnP per cluster; estimates ranked by inlier count.

    Ties break on lower mean reprojection error. Each estimate records the
    cluster member contributing most inliers as its reference image. The
    ranking does not depend on the order clusters are passed in. Raises
    NoPoseError when no cluster yields a pose.
    """
    by_source = {}
    for c in correspondences:
        by_source.setdefault(c.source_image_id, []).append(c)

    estimates = []
    for cluster in sorted(clusters, key=lambda cl: tuple(cl.members)):
        sub = []
        for member in cluster.members:
            sub.extend(by_source.get(member, []))
        if len(sub) < 4:
            continue
        rng = np.random.default_rng([seed, int(cluster.members[0])])
        try:
            est = pnp_ransac(sub, cam, rng=rng, **pnp_kwargs)
        except TooFewCorrespondences:
            continue
        if est is None:
            continue
        est.cluster_id = cluster.cluster_id
        counts = {}
        for i in est.inlier_indices:
            src = sub[i].source_image_id
            counts[src] = counts.get(src, 0) + 1
        est.reference_image_id = min(counts, key=lambda s: (-counts[s], s))
        estimates.append(est)

    if not estimates:
        raise NoPoseError("no cluster produced a pose")
    estimates.sort(key=lambda e: (-e.inlier_count, e.mean_reproj_error,
                                  tuple(sorted(
                                      c.source_image_id for c in e.inliers))))
    return estimates
