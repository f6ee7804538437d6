"""End-to-end query localization wiring all stages together.

Stage order per query: global retrieval -> match-count reranking ->
local matching -> candidate clustering -> per-cluster robust PnP ->
(optional) perceptual reranking -> (optional) ICP refinement. Every stage
consumes and produces the toolkit's file formats, so the same flow can be
driven as separate CLI invocations with identical results.
"""

import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .colmap_io import load_colmap_text, read_pose_file, write_pose_file
from .config import Config
from .errors import LocpipeError, MissingFeatures, NoPoseError, ParseError
from .evaluate import evaluate
from .features import load_features
from .geometry import PinholeCamera
from .localization import (build_correspondences, cluster_candidates,
                           localize_clusterwise, CameraCluster)
from .matching import match_descriptors
from .perceptual import rerank_clusters_perceptual
from .pose_refine import PointCloud, backproject_depth, icp_refine, load_depth_raster
from .preprocess import MaskImage, apply_mask, undistort_keypoints
from .retrieval import (DescriptorIndex, fuse, load_global_descriptors,
                        rerank_by_matches, retrieve)

__all__ = ["PipelineResult", "run_pipeline", "load_query_list",
           "fuse_global_files", "retrieve_candidates"]


@dataclass
class PipelineResult:
    poses: dict = field(default_factory=dict)          # name -> RigidPose
    failures: list = field(default_factory=list)       # names without a pose
    timings: dict = field(default_factory=dict)        # stage -> seconds
    warnings: list = field(default_factory=list)
    report: object = None                              # EvalReport when gt given
    candidates: dict = field(default_factory=dict)     # name -> reranked list


def load_query_list(path):
    """Parse `name MODEL width height params...` lines into cameras."""
    from .colmap_io import camera_from_params

    queries = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 5:
                raise ParseError("query line needs name, model, size, params",
                                 path=path, line=lineno)
            try:
                width, height = int(parts[2]), int(parts[3])
                params = [float(p) for p in parts[4:]]
            except ValueError:
                raise ParseError("malformed query camera", path=path,
                                 line=lineno) from None
            cam = camera_from_params(parts[1], width, height, params, path, lineno)
            queries.append((parts[0], cam))
    return queries


def fuse_global_files(paths):
    """Load several per-image global descriptor files and fuse them.

    Each file contributes one named sub-descriptor (its basename). Returns
    {image name: fused unit vector}; images must appear in every file.
    """
    subs = []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        subs.append((name, load_global_descriptors(path)))
    if not subs:
        raise LocpipeError("no global descriptor files configured")
    names = set(subs[0][1])
    for _, vectors in subs[1:]:
        names &= set(vectors)
    fused = {}
    for image in sorted(names):
        fused[image] = fuse([(sub, vectors[image]) for sub, vectors in subs]).fused
    return fused


class _FeatureDir:
    """Lazy .lfs loader with optional mask application."""

    def __init__(self, directory, mask_dir=None, bottom_band=0.0):
        self.directory = directory
        self.mask_dir = mask_dir
        self.bottom_band = bottom_band
        self._cache = {}

    def __call__(self, name):
        if name not in self._cache:
            path = os.path.join(self.directory, name + ".lfs")
            if not os.path.exists(path):
                raise MissingFeatures(name)
            feats = load_features(path, image_id=name)
            feats = self._masked(name, feats)
            self._cache[name] = feats
        return self._cache[name]

    def _masked(self, name, feats):
        if self.mask_dir is None:
            return feats
        mask_path = os.path.join(self.mask_dir, name)
        if not os.path.exists(mask_path):
            return feats
        from PIL import Image

        mask = MaskImage.from_grayscale(Image.open(mask_path).convert("L"))
        return apply_mask(feats, mask, self.bottom_band)


def retrieve_candidates(query_vec, query_feats, index, db_features, m, n,
                        ratio):
    """Global retrieval of m candidates, reranked by match count to n."""
    candidates = retrieve(query_vec, index, m)
    return rerank_by_matches(
        query_feats, candidates, db_features, n,
        matcher=lambda a, b: match_descriptors(a, b, ratio=ratio))


def _zero_distortion(cam: PinholeCamera) -> PinholeCamera:
    if not cam.has_distortion:
        return cam
    return PinholeCamera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


def _load_render(renders_dir, name):
    from PIL import Image

    path = os.path.join(renders_dir, name)
    if not os.path.exists(path):
        return None
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def _load_render_depth(renders_dir, name):
    path = os.path.join(renders_dir, name.rsplit(".", 1)[0] + ".dpt")
    if not os.path.exists(path):
        return None
    return load_depth_raster(path)


def _query_seed(base_seed, name):
    return [int(base_seed), zlib.crc32(name.encode("utf-8"))]


def _localize_one(name, qcam, cfg, sparse_map, name_to_id, db_features,
                  query_features, index, query_globals, pairs_by_query,
                  renders_dir, warnings):
    ratio = cfg.get_float("matching.ratio")
    qfeats = query_features(name)
    if qcam.has_distortion and len(qfeats):
        und = undistort_keypoints(qcam, qfeats.xy)
        kps = qfeats.keypoints.copy()
        kps[:, :2] = und
        qfeats = type(qfeats)(keypoints=kps, descriptors=qfeats.descriptors,
                              image_id=qfeats.image_id)
    pnp_cam = _zero_distortion(qcam)

    if pairs_by_query is not None:
        candidates = pairs_by_query.get(name, [])
    else:
        candidates = retrieve_candidates(
            query_globals[name], qfeats, index, db_features,
            cfg.get_int("retrieval.m"), cfg.get_int("retrieval.n"), ratio)
    if not candidates:
        return None, candidates

    matches = {}
    for cand in candidates:
        cid = name_to_id[cand]
        matches[cid] = match_descriptors(qfeats, db_features(cand), ratio=ratio)
    correspondences = build_correspondences(qfeats, matches, sparse_map)
    if len(correspondences) < 4:
        return None, candidates

    method = cfg.get("cluster.method").lower()
    candidate_ids = sorted(matches)
    if method == "none":
        clusters = [CameraCluster(cluster_id=0, members=candidate_ids,
                                  method="POSE")]
    elif method == "pose":
        clusters = cluster_candidates(sparse_map, candidate_ids, "POSE",
                                      pose_radius=cfg.get_float("cluster.pose_radius"))
    elif method == "covis":
        clusters = cluster_candidates(sparse_map, candidate_ids, "COVIS",
                                      covis_threshold=cfg.get_int("cluster.covis_threshold"))
    else:
        raise LocpipeError(f"unknown cluster.method {method!r}")

    try:
        estimates = localize_clusterwise(
            clusters, correspondences, pnp_cam,
            seed=zlib.crc32(name.encode("utf-8")) ^ cfg.get_int("seed"),
            threshold_px=cfg.get_float("pnp.threshold_px"),
            max_iters=cfg.get_int("pnp.max_iters"),
            confidence=cfg.get_float("pnp.confidence"),
            min_inliers=cfg.get_int("pnp.min_inliers"))
    except NoPoseError:
        return None, candidates

    if cfg.get("localize.rerank").lower() == "perceptual":
        query_img = _load_render(renders_dir, name) if renders_dir else None
        if query_img is None:
            warnings.append(f"{name}: no query render; keeping inlier ranking")
        else:
            id_to_name = {v: k for k, v in name_to_id.items()}
            estimates, _ = rerank_clusters_perceptual(
                query_img, pnp_cam, estimates,
                image_provider=lambda i: _load_render(renders_dir, id_to_name[i]),
                depth_provider=lambda i: _load_render_depth(renders_dir, id_to_name[i]),
                pose_of=lambda i: sparse_map.images[i].pose,
                camera_of=lambda i: sparse_map.camera_of(i))
    best = estimates[0]

    if cfg.get_bool("icp.enabled"):
        depth = _load_render_depth(renders_dir, name) if renders_dir else None
        if depth is None:
            warnings.append(f"{name}: ICP enabled but no depth map; skipped")
        else:
            source = backproject_depth(qcam, depth,
                                       stride=cfg.get_int("icp.stride"))
            target = PointCloud(np.array(
                [p.position for p in sparse_map.points.values()]))
            refined, _ = icp_refine(source, target, best.pose,
                                    max_iters=cfg.get_int("icp.max_iters"),
                                    trim=cfg.get_float("icp.trim"))
            best.pose = refined
    return best, candidates


def run_pipeline(cfg: Config, out_poses=None, pairs_by_query=None) -> PipelineResult:
    """Run the localization pipeline described by `cfg`.

    `pairs_by_query` (optional {query name: [db names]}) replaces global
    retrieval with precomputed candidates. Writes the submission-format
    pose file to `out_poses` when given and evaluates against gt.poses if
    the config names one.
    """
    result = PipelineResult()
    t0 = time.perf_counter()
    sparse_map = load_colmap_text(cfg.get_path("map.dir"))
    name_to_id = {img.name: i for i, img in sparse_map.images.items()}
    result.timings["load_map"] = time.perf_counter() - t0

    mask_dir = cfg.get_path("mask.dir") if cfg.has("mask.dir") else None
    band = cfg.get_float("mask.bottom_band")
    db_features = _FeatureDir(cfg.get_path("features.db_dir"), mask_dir, band)
    query_features = _FeatureDir(cfg.get_path("features.query_dir"), mask_dir, band)

    t0 = time.perf_counter()
    index = None
    query_globals = None
    if pairs_by_query is None:
        db_vectors = fuse_global_files(cfg.get_paths("retrieval.db_globals"))
        index = DescriptorIndex(db_vectors)
        query_globals = fuse_global_files(cfg.get_paths("retrieval.query_globals"))
    result.timings["load_globals"] = time.perf_counter() - t0

    queries = load_query_list(cfg.get_path("queries.list"))
    renders_dir = cfg.get_path("renders.dir") if cfg.has("renders.dir") else None

    t0 = time.perf_counter()

    def _work(item):
        qname, qcam = item
        best, candidates = _localize_one(
            qname, qcam, cfg, sparse_map, name_to_id, db_features,
            query_features, index, query_globals, pairs_by_query,
            renders_dir, result.warnings)
        return qname, best, candidates

    workers = cfg.get_int("pipeline.workers")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_work, queries))
    else:
        outcomes = [_work(item) for item in queries]
    result.timings["localize"] = time.perf_counter() - t0

    for qname, best, candidates in sorted(outcomes, key=lambda o: o[0]):
        result.candidates[qname] = candidates
        if best is None:
            result.failures.append(qname)
        else:
            result.poses[qname] = best.pose

    if out_poses is not None:
        write_pose_file(out_poses, result.poses)

    if cfg.has("gt.poses"):
        truths = read_pose_file(cfg.get_path("gt.poses"))
        scale = 1.0
        if cfg.has("scene.diameter"):
            scale = cfg.get_float("scene.diameter") / cfg.get_float("eval.scale_ref")
        usable = {n: p for n, p in result.poses.items() if n in truths}
        for qname in result.failures:
            result.warnings.append(f"{qname}: no pose estimated")
        if usable:
            result.report = evaluate(
                usable, {n: truths[n] for n in usable},
                translation_scale=scale)
            result.report.timings.update(result.timings)
            result.report.warnings.extend(result.warnings)
    return result
