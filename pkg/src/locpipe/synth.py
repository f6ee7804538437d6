"""Synthetic scenes with exact ground truth.

Scenes are rooms whose walls carry both the 3D map points and a smooth
procedural texture, so keypoints, descriptors, depth maps and renders are
all mutually consistent. Local descriptors are planted unit embeddings of
the point identity (plus optional noise); global descriptors are built by
pooling the planted local descriptors through hard-assignment residual
aggregation against a k-means codebook, exercising the retrieval math
end to end without any learned features.

Layouts:
  box         - square room, cameras on an inward ring looking outward.
  repetitive  - long hall with the same point/descriptor pattern planted
                on both end walls (one copy rotated), with the far copy
                observed by more database images. Matching a query near
                one end therefore produces an impostor correspondence set
                larger than the true one, which defeats a single global
                consensus but not cluster-wise estimation with warp-based
                reranking.

Everything is derived from one seeded generator, so regeneration with the
same spec and seed is bit-identical.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .colmap_io import save_colmap_text, write_pose_file
from .errors import InfeasibleSpec
from .features import LocalFeatureSet, save_features
from .geometry import PinholeCamera, RigidPose, project_many
from .pose_refine import save_depth_raster
from .retrieval import fit_codebook, save_codebook, save_global_descriptors, vlad_hard
from .scene import MapPoint, RegisteredImage, SparseMap

__all__ = ["SceneSpec", "SyntheticScene", "generate_scene", "look_at_pose",
           "render_view", "write_scene"]


@dataclass(frozen=True)
class SceneSpec:
    layout: str = "box"
    n_points: int = 300
    n_cameras: int = 12
    n_queries: int = 4
    image_width: int = 320
    image_height: int = 240
    focal: float = 277.0
    descriptor_dim: int = 32
    noise_px: float = 0.0
    descriptor_noise: float = 0.0
    distractor_fraction: float = 0.0
    codebook_k: int = 8
    render: bool = False


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose for a camera at `center` looking at `target`
    (x right, y down, z forward)."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise ValueError("camera cannot look at its own center")
    fwd = fwd / norm
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= rnorm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return RigidPose.from_matrix(rot, -(rot @ center))


def _texture(points, phases):
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    v = (0.55
         + 0.18 * np.sin(1.9 * x + 1.1 * y + phases[0]) * np.cos(1.4 * z + 0.6 * x + phases[1])
         + 0.12 * np.sin(3.1 * y + 2.3 * z + phases[2])
         + 0.08 * np.cos(2.7 * x - 1.7 * z + phases[3]))
    return np.clip(v, 0.0, 1.0)


def render_view(cam: PinholeCamera, pose: RigidPose, box_lo, box_hi, phases):
    """Raycast the textured room interior; returns (image, z-depth)."""
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.column_stack([
        (uu.ravel() - cam.cx) / cam.fx,
        (vv.ravel() - cam.cy) / cam.fy,
        np.ones(h * w),
    ])
    rot = pose.rotation_matrix
    center = pose.center
    dirs_world = dirs_cam @ rot  # = R^T d per row
    t_exit = np.full(h * w, np.inf)
    for axis in range(3):
        d = dirs_world[:, axis]
        with np.errstate(divide="ignore"):
            t_axis = np.where(
                d > 0, (box_hi[axis] - center[axis]) / d,
                np.where(d < 0, (box_lo[axis] - center[axis]) / d, np.inf))
        t_exit = np.minimum(t_exit, t_axis)
    hits = center[None, :] + t_exit[:, None] * dirs_world
    image = _texture(hits, phases).reshape(h, w)
    # camera z component of dirs_cam is 1, so t_exit is the z-depth
    depth = t_exit.reshape(h, w)
    return image, depth


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    camera: PinholeCamera
    sparse_map: SparseMap
    db_names: dict                    # image id -> name
    db_features: dict                 # name -> LocalFeatureSet
    query_names: list
    query_features: dict
    query_poses: dict                 # name -> RigidPose (ground truth)
    query_truth: dict                 # name -> {keypoint idx: point id}
    codebook: object
    db_globals: dict                  # sub name -> {image name: vector}
    query_globals: dict
    box: tuple                        # (lo, hi) room corners
    texture_phases: np.ndarray
    renders: dict = field(default_factory=dict)   # name -> image
    depths: dict = field(default_factory=dict)    # name -> z-depth map

    @property
    def diameter(self) -> float:
        return self.sparse_map.diameter()

    def db_id_of(self, name):
        for image_id, image_name in self.db_names.items():
            if image_name == name:
                return image_id
        raise KeyError(name)


def _unit_rows(rng, n, dim):
    vecs = rng.normal(size=(n, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def _observe(rng, spec, cam, pose, point_ids, positions, descriptors):
    """Project points into a view and assemble its noisy feature set.

    Returns (feature set, {keypoint idx: point id}, noiseless pixels).
    """
    pix, in_front = project_many(cam, pose, positions)
    margin = 1.0
    visible = in_front & (pix[:, 0] >= margin) & (pix[:, 0] <= cam.width - 1 - margin) \
        & (pix[:, 1] >= margin) & (pix[:, 1] <= cam.height - 1 - margin)
    idx = np.nonzero(visible)[0]
    clean = pix[idx]
    noisy = clean + (rng.normal(size=clean.shape) * spec.noise_px
                     if spec.noise_px > 0 else 0.0)
    noisy[:, 0] = np.clip(noisy[:, 0], 0, cam.width - 1)
    noisy[:, 1] = np.clip(noisy[:, 1], 0, cam.height - 1)
    desc = descriptors[idx]
    if spec.descriptor_noise > 0:
        desc = desc + rng.normal(size=desc.shape) * spec.descriptor_noise
        desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)

    n_dis = int(round(spec.distractor_fraction * len(idx)))
    if n_dis:
        dis_xy = np.column_stack([
            rng.uniform(0, cam.width - 1, n_dis),
            rng.uniform(0, cam.height - 1, n_dis),
        ])
        noisy = np.vstack([noisy, dis_xy])
        desc = np.vstack([desc, _unit_rows(rng, n_dis, spec.descriptor_dim)])
        clean = np.vstack([clean, dis_xy])
        idx = np.concatenate([idx, np.full(n_dis, -1)])

    order = rng.permutation(len(idx))
    keypoints = np.column_stack([
        noisy[order], np.ones(len(order)), np.zeros(len(order))])
    features = LocalFeatureSet(keypoints=keypoints, descriptors=desc[order])
    truth = {k: int(point_ids[idx[order[k]]])
             for k in range(len(order)) if idx[order[k]] >= 0}
    return features, truth, clean[order]


def _box_views(spec, rng):
    lo = np.array([0.0, 0.0, 0.0])
    hi = np.array([10.0, 10.0, 4.0])
    mid = 0.5 * (lo + hi)

    walls = rng.integers(0, 4, size=spec.n_points)
    a = rng.uniform(0.5, 9.5, size=spec.n_points)
    b = rng.uniform(0.5, 3.5, size=spec.n_points)
    positions = np.zeros((spec.n_points, 3))
    for i, w in enumerate(walls):
        if w == 0:
            positions[i] = (0.0, a[i], b[i])
        elif w == 1:
            positions[i] = (10.0, a[i], b[i])
        elif w == 2:
            positions[i] = (a[i], 0.0, b[i])
        else:
            positions[i] = (a[i], 10.0, b[i])

    db_poses = []
    for k in range(spec.n_cameras):
        angle = 2.0 * np.pi * k / spec.n_cameras
        center = mid[:2] + 1.0 * np.array([np.cos(angle), np.sin(angle)])
        eye = np.array([center[0], center[1], 1.8 + 0.1 * np.sin(3 * angle)])
        target = mid[:2] + 8.0 * np.array([np.cos(angle), np.sin(angle)])
        db_poses.append(look_at_pose(eye, np.array([target[0], target[1], 2.0])))

    query_poses = []
    for k in range(spec.n_queries):
        angle = 2.0 * np.pi * (k + 0.37) / max(1, spec.n_queries)
        eye = mid[:2] + 0.9 * np.array([np.cos(angle), np.sin(angle)])
        eye = np.array([eye[0], eye[1], 1.9 + 0.05 * np.cos(2 * angle)])
        target = mid[:2] + 8.0 * np.array([np.cos(angle), np.sin(angle)])
        query_poses.append(look_at_pose(eye, np.array([target[0], target[1], 2.1])))

    descriptors = _unit_rows(rng, spec.n_points, spec.descriptor_dim)
    return lo, hi, positions, descriptors, db_poses, query_poses


def _repetitive_views(spec, rng):
    lo = np.array([0.0, 0.0, 0.0])
    hi = np.array([70.0, 10.0, 5.0])
    n_pat = max(24, spec.n_points // 2)

    # off-wall depth jitter keeps the pattern non-planar (a planar target
    # viewed head-on conditions PnP poorly)
    dx = rng.uniform(0.0, 1.6, size=n_pat)
    yy = rng.uniform(3.0, 6.5, size=n_pat)
    zz = rng.uniform(1.0, 4.0, size=n_pat)
    pts_a = np.column_stack([dx, yy, zz])
    # far copy: proper rigid transform of the pattern (90 degree roll about
    # the hall axis plus translation to the opposite end wall)
    pts_b = np.column_stack([dx + 68.4, 7.5 - zz, yy - 2.0])
    positions = np.vstack([pts_a, pts_b])

    pattern_desc = _unit_rows(rng, n_pat, spec.descriptor_dim)
    descriptors = np.vstack([pattern_desc, pattern_desc])  # identical twins

    # two near-wall cameras see only part of the near pattern; four far
    # cameras see the far copy completely
    db_poses = [
        look_at_pose(np.array([2.8, 4.6, 2.3]), np.array([0.0, 5.0, 2.5])),
        look_at_pose(np.array([2.8, 5.4, 2.2]), np.array([0.0, 5.0, 2.5])),
        look_at_pose(np.array([61.0, 4.4, 2.4]), np.array([70.0, 5.0, 2.5])),
        look_at_pose(np.array([61.0, 5.6, 2.3]), np.array([70.0, 5.0, 2.5])),
        look_at_pose(np.array([62.0, 5.0, 2.1]), np.array([70.0, 5.0, 2.5])),
        look_at_pose(np.array([60.0, 5.0, 2.6]), np.array([70.0, 5.0, 2.5])),
    ]
    query_poses = [
        look_at_pose(np.array([5.5, 4.8 + 0.3 * k, 2.2]), np.array([0.0, 5.0, 2.5]))
        for k in range(max(1, spec.n_queries))
    ]
    return lo, hi, positions, descriptors, db_poses, query_poses


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Build a deterministic synthetic scene for the given spec and seed."""
    if spec.n_cameras < 2 or spec.n_points < 8:
        raise InfeasibleSpec("need at least 2 cameras and 8 points")
    if spec.layout not in ("box", "repetitive"):
        raise InfeasibleSpec(f"unknown layout {spec.layout!r}")
    rng = np.random.default_rng(seed)

    cam = PinholeCamera(
        fx=spec.focal, fy=spec.focal,
        cx=spec.image_width / 2.0, cy=spec.image_height / 2.0,
        width=spec.image_width, height=spec.image_height,
    )
    if spec.layout == "box":
        lo, hi, positions, descriptors, db_poses, query_poses = _box_views(spec, rng)
    else:
        lo, hi, positions, descriptors, db_poses, query_poses = _repetitive_views(spec, rng)
    phases = rng.uniform(0, 2 * np.pi, size=4)

    point_ids = np.arange(1, len(positions) + 1)
    db_names = {k + 1: f"db_{k:03d}.png" for k in range(len(db_poses))}

    db_features = {}
    db_truth = {}
    for image_id in sorted(db_names):
        pose = db_poses[image_id - 1]
        feats, truth, _ = _observe(rng, spec, cam, pose, point_ids,
                                   positions, descriptors)
        feats.image_id = db_names[image_id]
        db_features[db_names[image_id]] = feats
        db_truth[image_id] = truth

    # keep only points with track length >= 2
    track = {int(pid): [] for pid in point_ids}
    for image_id, truth in db_truth.items():
        for kp_idx, pid in truth.items():
            track[pid].append((image_id, kp_idx))
    keep = {pid for pid, obs in track.items() if len(obs) >= 2}
    if len(keep) < 8:
        raise InfeasibleSpec(
            f"only {len(keep)} points visible in >= 2 cameras; widen the spec")

    points = {}
    for pid in sorted(keep):
        idx = pid - 1
        rgb = tuple(int(v) % 256 for v in np.floor(np.abs(positions[idx]) * 53.0))
        points[pid] = MapPoint(position=positions[idx],
                               track=sorted(track[pid]), rgb=rgb)
    images = {}
    for image_id in sorted(db_names):
        name = db_names[image_id]
        observed = {kp: pid for kp, pid in db_truth[image_id].items() if pid in keep}
        images[image_id] = RegisteredImage(
            id=image_id, name=name, camera_id=1, pose=db_poses[image_id - 1],
            observed_points=observed,
            keypoints2d=db_features[name].xy.copy(),
            timestamp=float(image_id),
        )
    sparse_map = SparseMap({1: cam}, images, points)

    query_names = [f"q_{k:03d}.png" for k in range(len(query_poses))]
    query_features = {}
    query_truth = {}
    gt_poses = {}
    for k, name in enumerate(query_names):
        feats, truth, _ = _observe(rng, spec, cam, query_poses[k], point_ids,
                                   positions, descriptors)
        feats.image_id = name
        query_features[name] = feats
        query_truth[name] = truth
        gt_poses[name] = query_poses[k]

    all_desc = np.vstack([f.descriptors for f in db_features.values()])
    codebook = fit_codebook(all_desc, k=min(spec.codebook_k, len(all_desc)),
                            seed=seed)

    def _globals_for(features_by_name):
        vlad = {}
        mean = {}
        for name, feats in features_by_name.items():
            vlad[name] = vlad_hard(feats.descriptors, codebook).reshape(-1)
            m = feats.descriptors.mean(axis=0)
            mean[name] = m / np.linalg.norm(m)
        return {"vlad": vlad, "mean": mean}

    scene = SyntheticScene(
        spec=spec, seed=seed, camera=cam, sparse_map=sparse_map,
        db_names=db_names, db_features=db_features,
        query_names=query_names, query_features=query_features,
        query_poses=gt_poses, query_truth=query_truth,
        codebook=codebook,
        db_globals=_globals_for(db_features),
        query_globals=_globals_for(query_features),
        box=(lo, hi), texture_phases=phases,
    )

    if spec.render:
        for image_id, name in sorted(db_names.items()):
            img, depth = render_view(cam, db_poses[image_id - 1], lo, hi, phases)
            scene.renders[name] = img
            scene.depths[name] = depth
        for k, name in enumerate(query_names):
            img, depth = render_view(cam, query_poses[k], lo, hi, phases)
            scene.renders[name] = img
            scene.depths[name] = depth
    return scene


def write_scene(scene: SyntheticScene, out_dir):
    """Write a scene to disk in the toolkit's file formats.

    Layout: map/ (COLMAP text), features/{db,query}/*.lfs, globals/*.gds,
    codebook.cbk, queries.txt, gt_poses.txt, renders/*.png + *.dpt, and a
    pipeline-ready scene.cfg. Returns the config path.
    """
    os.makedirs(out_dir, exist_ok=True)
    save_colmap_text(scene.sparse_map, os.path.join(out_dir, "map"))

    feat_db = os.path.join(out_dir, "features", "db")
    feat_q = os.path.join(out_dir, "features", "query")
    os.makedirs(feat_db, exist_ok=True)
    os.makedirs(feat_q, exist_ok=True)
    for name, feats in scene.db_features.items():
        save_features(os.path.join(feat_db, name + ".lfs"), feats)
    for name, feats in scene.query_features.items():
        save_features(os.path.join(feat_q, name + ".lfs"), feats)

    globals_dir = os.path.join(out_dir, "globals")
    os.makedirs(globals_dir, exist_ok=True)
    for sub, vectors in scene.db_globals.items():
        save_global_descriptors(os.path.join(globals_dir, f"db_{sub}.gds"), vectors)
    for sub, vectors in scene.query_globals.items():
        save_global_descriptors(os.path.join(globals_dir, f"query_{sub}.gds"), vectors)
    save_codebook(os.path.join(out_dir, "codebook.cbk"), scene.codebook)

    cam = scene.camera
    with open(os.path.join(out_dir, "queries.txt"), "w") as fh:
        for name in scene.query_names:
            fh.write(f"{name} PINHOLE {cam.width} {cam.height} "
                     f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}\n")
    write_pose_file(os.path.join(out_dir, "gt_poses.txt"), scene.query_poses)

    if scene.renders:
        from PIL import Image

        renders_dir = os.path.join(out_dir, "renders")
        os.makedirs(renders_dir, exist_ok=True)
        for name, img in scene.renders.items():
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(os.path.join(renders_dir, name))
            save_depth_raster(
                os.path.join(renders_dir, name.rsplit(".", 1)[0] + ".dpt"),
                scene.depths[name])

    db_sub_files = ",".join(
        os.path.join("globals", f"db_{sub}.gds") for sub in sorted(scene.db_globals))
    q_sub_files = ",".join(
        os.path.join("globals", f"query_{sub}.gds") for sub in sorted(scene.query_globals))
    cfg_path = os.path.join(out_dir, "scene.cfg")
    with open(cfg_path, "w") as fh:
        fh.write("# pipeline configuration for this synthetic scene\n")
        fh.write("map.dir = map\n")
        fh.write("features.db_dir = features/db\n")
        fh.write("features.query_dir = features/query\n")
        fh.write(f"retrieval.db_globals = {db_sub_files}\n")
        fh.write(f"retrieval.query_globals = {q_sub_files}\n")
        fh.write("queries.list = queries.txt\n")
        fh.write("gt.poses = gt_poses.txt\n")
        if scene.renders:
            fh.write("renders.dir = renders\n")
        fh.write(f"scene.diameter = {scene.diameter:.17g}\n")
        fh.write(f"seed = {scene.seed}\n")
    return cfg_path
