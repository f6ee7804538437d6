"""Command line interface.

Subcommands mirror the pipeline stages so the whole flow can run either
in one process (`pipeline`) or as separate invocations exchanging files.
Exit codes: 0 on success, 1 on errors, 2 when any query could not be
localized (unless --allow-failures).
"""

import argparse
import os
import sys

import numpy as np

from .colmap_io import load_colmap_text, read_pose_file, save_colmap_text, write_pose_file
from .config import Config, load_config
from .errors import LocpipeError
from .evaluate import evaluate
from .mapping import refine_map
from .pipeline import (fuse_global_files, load_query_list, retrieve_candidates,
                       run_pipeline, _FeatureDir, _load_render_depth)
from .pose_refine import PointCloud, backproject_depth, icp_refine
from .retrieval import DescriptorIndex
from .synth import SceneSpec, generate_scene, write_scene


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else Config()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise LocpipeError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def _cmd_synth_generate(args):
    spec = SceneSpec(
        layout=args.layout, n_points=args.points, n_cameras=args.cameras,
        n_queries=args.queries, noise_px=args.noise_px,
        descriptor_noise=args.descriptor_noise,
        distractor_fraction=args.distractors, render=args.render,
    )
    scene = generate_scene(spec, seed=args.seed)
    cfg_path = write_scene(scene, args.out)
    print(f"scene written to {args.out} ({len(scene.sparse_map.points)} points, "
          f"{len(scene.sparse_map.images)} images, "
          f"{len(scene.query_names)} queries); config: {cfg_path}")
    return 0


def _cmd_map_ingest(args):
    sparse_map = load_colmap_text(args.colmap)
    save_colmap_text(sparse_map, args.out)
    print(f"ingested {len(sparse_map.cameras)} cameras, "
          f"{len(sparse_map.images)} images, {len(sparse_map.points)} points "
          f"-> {args.out}")
    return 0


def _cmd_map_refine(args):
    sparse_map = load_colmap_text(args.map)
    refined, report = refine_map(
        sparse_map, sigma_threshold=args.sigma_threshold,
        sigma_mult=args.sigma_mult, min_track=args.min_track)
    save_colmap_text(refined, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_text())
    print(f"kept {report.kept} rejected {report.rejected} "
          f"(threshold {report.threshold:.6g})")
    return 0


def _cmd_retrieve(args):
    cfg = _config_from_args(args)
    db_features = _FeatureDir(cfg.get_path("features.db_dir"))
    query_features = _FeatureDir(cfg.get_path("features.query_dir"))
    index = DescriptorIndex(fuse_global_files(cfg.get_paths("retrieval.db_globals")))
    query_globals = fuse_global_files(cfg.get_paths("retrieval.query_globals"))
    queries = load_query_list(cfg.get_path("queries.list"))
    m = args.m if args.m else cfg.get_int("retrieval.m")
    n = args.n if args.n else cfg.get_int("retrieval.n")
    with open(args.out, "w") as fh:
        for name, _cam in queries:
            candidates = retrieve_candidates(
                query_globals[name], query_features(name), index, db_features,
                m, n, cfg.get_float("matching.ratio"))
            for cand in candidates:
                fh.write(f"{name} {cand}\n")
    print(f"wrote pairs for {len(queries)} queries to {args.out}")
    return 0


def _read_pairs(path):
    pairs = {}
    with open(path, "r") as fh:
        for raw in fh:
            parts = raw.split()
            if len(parts) == 2:
                pairs.setdefault(parts[0], []).append(parts[1])
    return pairs


def _finish_localization(result, out, allow_failures):
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"localized {len(result.poses)} queries "
          f"({len(result.failures)} failures) -> {out}")
    if result.report is not None:
        sys.stdout.write(result.report.to_text())
    if result.failures and not allow_failures:
        return 2
    return 0


def _cmd_localize(args):
    cfg = _config_from_args(args)
    if args.map:
        cfg.set("map.dir", os.path.abspath(args.map))
    if args.queries:
        cfg.set("queries.list", os.path.abspath(args.queries))
    if args.cluster:
        cfg.set("cluster.method", args.cluster)
    pairs = None
    if args.retrieval == "file":
        if not args.pairs:
            raise LocpipeError("--retrieval file needs --pairs")
        pairs = _read_pairs(args.pairs)
    result = run_pipeline(cfg, out_poses=args.out, pairs_by_query=pairs)
    return _finish_localization(result, args.out, args.allow_failures)


def _cmd_pipeline(args):
    cfg = _config_from_args(args)
    result = run_pipeline(cfg, out_poses=args.out)
    return _finish_localization(result, args.out, args.allow_failures)


def _cmd_refine_icp(args):
    cfg = _config_from_args(args)
    sparse_map = load_colmap_text(cfg.get_path("map.dir"))
    queries = dict(load_query_list(cfg.get_path("queries.list")))
    poses = read_pose_file(args.poses)
    renders_dir = cfg.get_path("renders.dir") if cfg.has("renders.dir") else None
    target = PointCloud(np.array([p.position for p in sparse_map.points.values()]))
    refined = {}
    skipped = 0
    for name, pose in poses.items():
        depth = _load_render_depth(renders_dir, name) if renders_dir else None
        if depth is None or name not in queries:
            print(f"warning: {name}: no depth map; pose kept", file=sys.stderr)
            refined[name] = pose
            skipped += 1
            continue
        source = backproject_depth(queries[name], depth,
                                   stride=cfg.get_int("icp.stride"))
        refined[name], _ = icp_refine(
            source, target, pose, max_iters=cfg.get_int("icp.max_iters"),
            trim=cfg.get_float("icp.trim"))
    write_pose_file(args.out, refined)
    print(f"refined {len(refined) - skipped} poses ({skipped} kept) -> {args.out}")
    return 0


def _cmd_evaluate(args):
    report = evaluate(args.estimates, args.gt, translation_scale=args.scale)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="locpipe",
        description="Sparse-map visual localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthetic scene tools")
    synth_sub = p.add_subparsers(dest="synth_command", required=True)
    g = synth_sub.add_parser("generate", help="generate a synthetic scene")
    g.add_argument("--out", required=True)
    g.add_argument("--layout", default="box", choices=["box", "repetitive"])
    g.add_argument("--points", type=int, default=120)
    g.add_argument("--cameras", type=int, default=12)
    g.add_argument("--queries", type=int, default=4)
    g.add_argument("--noise-px", type=float, default=0.0)
    g.add_argument("--descriptor-noise", type=float, default=0.0)
    g.add_argument("--distractors", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--render", action="store_true")
    g.set_defaults(func=_cmd_synth_generate)

    p = sub.add_parser("map", help="map ingestion and refinement")
    map_sub = p.add_subparsers(dest="map_command", required=True)
    mi = map_sub.add_parser("ingest", help="validate and normalize a COLMAP text model")
    mi.add_argument("--colmap", required=True)
    mi.add_argument("--out", required=True)
    mi.set_defaults(func=_cmd_map_ingest)
    mr = map_sub.add_parser("refine", help="reject high-uncertainty map points")
    mr.add_argument("--map", required=True)
    mr.add_argument("--out", required=True)
    mr.add_argument("--sigma-mult", type=float, default=3.0)
    mr.add_argument("--sigma-threshold", type=float, default=None)
    mr.add_argument("--min-track", type=int, default=2)
    mr.add_argument("--report", default=None)
    mr.set_defaults(func=_cmd_map_refine)

    r = sub.add_parser("retrieve", help="rank database candidates per query")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--m", type=int, default=None)
    r.add_argument("--n", type=int, default=None)
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.set_defaults(func=_cmd_retrieve)

    l = sub.add_parser("localize", help="estimate query poses")
    l.add_argument("--config", required=True)
    l.add_argument("--map", default=None)
    l.add_argument("--queries", default=None)
    l.add_argument("--retrieval", default="global", choices=["global", "file"])
    l.add_argument("--pairs", default=None)
    l.add_argument("--cluster", default=None, choices=["pose", "covis", "none"])
    l.add_argument("--out", required=True)
    l.add_argument("--allow-failures", action="store_true")
    l.add_argument("--set", action="append", metavar="KEY=VALUE")
    l.set_defaults(func=_cmd_localize)

    ri = sub.add_parser("refine-icp", help="ICP-refine an estimated pose file")
    ri.add_argument("--config", required=True)
    ri.add_argument("--poses", required=True)
    ri.add_argument("--out", required=True)
    ri.add_argument("--set", action="append", metavar="KEY=VALUE")
    ri.set_defaults(func=_cmd_refine_icp)

    e = sub.add_parser("evaluate", help="compare estimated poses to ground truth")
    e.add_argument("--estimates", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scale", type=float, default=1.0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_evaluate)

    pl = sub.add_parser("pipeline", help="run all localization stages")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--allow-failures", action="store_true")
    pl.add_argument("--set", action="append", metavar="KEY=VALUE")
    pl.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LocpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
