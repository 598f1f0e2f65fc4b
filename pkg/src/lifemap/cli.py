"""Command-line pipeline orchestrator.

Subcommands cover every stage: `synth`, `merge`, `detect`, `navmap`, `plan`,
`eval`. Each one is a pure function of its inputs plus the configuration
file; outputs land under --out together with a manifest listing the SHA-256
of every produced file. Exit codes: 0 success, 2 invalid configuration or
inputs, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import PipelineConfig, load_config
from .elevation import export_elevation_map, load_elevation_map, save_elevation_map
from .errors import (
    ConfigError,
    DisconnectedSessionError,
    GraphValidationError,
    InvalidEndpointError,
    LifemapError,
    ResourceNotFoundError,
    SessionFormatError,
)
from .geometry import PointCloud
from .octree import evaluate_changes, ChangeSet, OccupancyOctree, save_octree, summary_report
from .planner import render_overlay
from .session import load_session, read_ply, save_session, write_ply
from .synthworld import (
    change_ground_truth,
    evaluate_trajectory,
    filter_visible,
    generate_session,
    load_trajectories,
    load_world,
    point_to_point_error,
    sample_world_surface,
)

_VALIDATION_ERRORS = (
    ConfigError,
    SessionFormatError,
    InvalidEndpointError,
    GraphValidationError,
    DisconnectedSessionError,
    ResourceNotFoundError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, cfg: PipelineConfig, files: list[Path]):
    outputs = {}
    for f in sorted(set(files)):
        outputs[str(f.relative_to(out))] = _sha256(f)
    manifest = {"command": command, "config_sha256": cfg.sha256(), "outputs": outputs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dump_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _parse_point(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected 'x,y', got {text!r}")
    return np.array([float(parts[0]), float(parts[1])])


def _session_files(root: Path) -> list[Path]:
    return [p for p in root.rglob("*") if p.is_file()]


def _log(args, message: str):
    if args.verbose:
        print(message, file=sys.stderr)


def cmd_synth(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    world = load_world(args.world)
    trajectories = load_trajectories(args.traj)
    if not trajectories:
        raise ValueError(f"{args.traj}: no sessions defined")
    files: list[Path] = []
    (out / "gt").mkdir(parents=True, exist_ok=True)
    used_epochs = sorted({t.epoch for t in trajectories})
    by_epoch: dict[int, list] = {e: [] for e in used_epochs}
    for traj in trajectories:
        _log(args, f"generating session {traj.session_id} (epoch {traj.epoch})")
        session, gt = generate_session(world, traj)
        sdir = out / "sessions" / traj.session_id
        save_session(session, sdir)
        files += _session_files(sdir)
        gt_file = out / "gt" / f"{traj.session_id}_poses.json"
        pipeline.save_gt_poses(gt_file, traj.session_id, gt.poses)
        files.append(gt_file)
        obs = out / "gt" / f"{traj.session_id}_observed.ply"
        write_ply(obs, gt.surface_cloud.points)
        files.append(obs)
        by_epoch[traj.epoch].append(traj)
    for epoch in used_epochs:
        surf = sample_world_surface(world, epoch, cfg.synth.surface_density)
        f = out / "gt" / f"epoch_{epoch}_surface.ply"
        write_ply(f, surf.points)
        files.append(f)
    for a, b in zip(used_epochs, used_epochs[1:]):
        changed, static = change_ground_truth(world, a, b, cfg.synth.surface_density)
        cdir = out / "gt" / f"changes_{a}_{b}"
        cdir.mkdir(parents=True, exist_ok=True)
        write_ply(cdir / "changed.ply", changed.points)
        write_ply(cdir / "static.ply", static.points)
        seen_parts = []
        for epoch, trajs in ((a, by_epoch[a]), (b, by_epoch[b])):
            if trajs and len(changed):
                seen_parts.append(filter_visible(world, epoch, changed, trajs).points)
        seen = np.unique(np.concatenate(seen_parts), axis=0) if seen_parts else np.zeros((0, 3))
        write_ply(cdir / "changed_observed.ply", seen)
        files += [cdir / "changed.ply", cdir / "static.ply", cdir / "changed_observed.ply"]
    return files


def cmd_merge(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    sessions = [load_session(p, cfg.cache_budget) for p in args.sessions]
    _log(args, f"merging {len(sessions)} sessions")
    merged, inter_edges, report = pipeline.merge_sessions(sessions, cfg)
    files: list[Path] = []
    for s in merged:
        sdir = out / "sessions" / s.session_id
        save_session(s, sdir)
        files += _session_files(sdir)
    report_file = out / "report.txt"
    report_file.write_text(report.format_text())
    files.append(report_file)
    files.append(_dump_json(out / "inter_edges.json", pipeline.inter_edges_to_json(inter_edges)))
    _log(args, f"final cost {report.final_cost:.3e} after {report.iterations} iterations")
    return files


def cmd_detect(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    priors = [pipeline.octree_from_path(p, cfg) for p in (args.prior or [])]
    current = pipeline.octree_from_path(args.current, cfg)
    latest, changes = pipeline.detect_stage(priors, current)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    save_octree(latest, out / "latest.oct")
    files.append(out / "latest.oct")
    write_ply(out / "removed.ply", changes.removed.occupied_centers())
    write_ply(out / "added.ply", changes.added.occupied_centers())
    write_ply(out / "latest_points.ply", latest.occupied_centers())
    files += [out / "removed.ply", out / "added.ply", out / "latest_points.ply"]
    names = {"current": current, "removed": changes.removed, "added": changes.added, "latest": latest}
    if priors:
        names = {"prior": priors[0], **names}
    summary = out / "summary.txt"
    summary.write_text(summary_report(names))
    files.append(summary)
    _log(args, f"removed {len(changes.removed.occupied)} added {len(changes.added.occupied)} voxels")
    return files


def cmd_navmap(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    latest_path = Path(args.latest)
    if latest_path.is_file() and latest_path.suffix == ".ply":
        cloud = PointCloud(read_ply(latest_path))
    else:
        cloud = pipeline.octree_from_path(latest_path, cfg).occupied_cloud()
    sessions = None
    inter_pairs = None
    if args.merged:
        mdir = Path(args.merged)
        sessions = [
            load_session(p, cfg.cache_budget) for p in sorted((mdir / "sessions").iterdir())
        ]
        edges_file = mdir / "inter_edges.json"
        if edges_file.is_file():
            edges = pipeline.inter_edges_from_json(json.loads(edges_file.read_text()))
            inter_pairs = [(e.match_vertex, e.query_vertex) for e in edges]
    cloud = PointCloud(cloud.points, frame="")
    navmap = pipeline.navmap_stage(cloud, cfg, sessions, inter_pairs)
    save_elevation_map(navmap, out)
    export_elevation_map(navmap, out)
    files = [
        out / "heights.npy", out / "traversability.npy", out / "counts.npy",
        out / "grid_meta.json", out / "navmap_heights.pgm",
        out / "navmap_traversability.pgm", out / "navmap_meta.json",
    ]
    _log(args, f"navmap {navmap.shape[1]}x{navmap.shape[0]} cells")
    return files


def cmd_plan(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    navmap = load_elevation_map(args.navmap)
    start = _parse_point(args.start)
    goal = _parse_point(args.goal)
    roadmap, path = pipeline.plan_stage(navmap, start, goal, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if path is None:
        payload = {"status": "unreachable", "waypoints": [], "total_length": None}
    else:
        payload = {
            "status": "ok",
            "waypoints": [[float(x), float(y)] for x, y in path.waypoints],
            "total_length": path.total_length,
        }
    files = [_dump_json(out / "path.json", payload)]
    files.append(
        _dump_json(
            out / "roadmap.json",
            {"nodes": int(len(roadmap.nodes)), "edges": int(len(roadmap.edges))},
        )
    )
    render_overlay(navmap, roadmap, path, out / "overlay.png")
    files.append(out / "overlay.png")
    _log(args, f"path: {payload['status']} length {payload['total_length']}")
    return files


def cmd_eval(args, cfg: PipelineConfig) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "traj":
        gt_by_sid = {}
        for g in args.gt:
            sid, poses = pipeline.load_gt_poses(g)
            gt_by_sid[sid] = poses
        est, gt, segments = [], [], []
        for k, est_path in enumerate(args.est):
            s = load_session(est_path, cfg.cache_budget)
            if s.session_id not in gt_by_sid:
                raise ValueError(f"no ground-truth poses for session {s.session_id!r}")
            for vid in s.graph.vertex_ids():
                est.append(s.graph.vertices[vid].pose)
                gt.append(gt_by_sid[s.session_id][vid])
                segments.append(k)
        m = evaluate_trajectory(est, gt, segments=segments)
        payload = {
            "ate_rmse": m.ate_rmse,
            "rpe_rmse": m.rpe_rmse,
            "poses": m.pose_count,
            "rpe_pairs": m.rpe_pairs,
        }
    elif args.mode == "map":
        est_cloud = _load_cloud(args.est[0], cfg)
        gt_cloud = PointCloud(read_ply(Path(args.gt[0])))
        payload = point_to_point_error(est_cloud, gt_cloud).as_dict()
    elif args.mode == "change":
        est_dir = Path(args.est[0])
        gt_dir = Path(args.gt[0])
        removed = read_ply(est_dir / "removed.ply")
        added = read_ply(est_dir / "added.ply")
        res = cfg.octree.resolution
        pred = ChangeSet(
            _cloud_octree(removed, res), _cloud_octree(added, res)
        )
        observed = gt_dir / "changed_observed.ply"
        changed_file = observed if observed.is_file() else gt_dir / "changed.ply"
        metrics = evaluate_changes(
            pred,
            PointCloud(read_ply(changed_file)),
            PointCloud(read_ply(gt_dir / "static.ply")),
            cfg.change_threshold,
        )
        payload = metrics.as_dict()
    else:
        raise ValueError(f"unknown mode {args.mode!r}")
    return [_dump_json(out / "metrics.json", payload)]


def _load_cloud(path_str: str, cfg: PipelineConfig) -> PointCloud:
    path = Path(path_str)
    if path.is_file() and path.suffix == ".ply":
        return PointCloud(read_ply(path))
    return PointCloud(pipeline.octree_from_path(path, cfg).occupied_centers())


def _cloud_octree(centers: np.ndarray, resolution: float) -> OccupancyOctree:
    tree = OccupancyOctree(resolution)
    if centers.shape[0]:
        tree.occupied = set(tree.voxel_keys(centers).tolist())
    return tree


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="pipeline configuration file (YAML)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override every stage seed")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lifemap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sessions + ground truth")
    p.add_argument("--world", required=True)
    p.add_argument("--traj", required=True)

    p = sub.add_parser("merge", parents=[common], help="align and optimize sessions")
    p.add_argument("sessions", nargs="+")

    p = sub.add_parser("detect", parents=[common], help="octree change detection + latest map")
    p.add_argument("--prior", action="append", default=[])
    p.add_argument("--current", required=True)

    p = sub.add_parser("navmap", parents=[common], help="elevation + traversability maps")
    p.add_argument("--latest", required=True)
    p.add_argument("--merged", default=None, help="merge output dir for place clustering")

    p = sub.add_parser("plan", parents=[common], help="roadmap planning on a navmap")
    p.add_argument("--navmap", required=True)
    p.add_argument("--start", required=True, help="x,y meters")
    p.add_argument("--goal", required=True, help="x,y meters")

    p = sub.add_parser("eval", parents=[common], help="metric reports")
    p.add_argument("--mode", required=True, choices=("traj", "map", "change"))
    p.add_argument("--est", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "merge": cmd_merge,
    "detect": cmd_detect,
    "navmap": cmd_navmap,
    "plan": cmd_plan,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = _COMMANDS[args.command](args, cfg)
        _write_manifest(out, args.command, cfg, files)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except LifemapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
