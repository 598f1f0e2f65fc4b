"""Stage functions shared by the command-line tool, experiment scripts, and
tests: each takes artifacts plus a PipelineConfig and returns plain objects."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .elevation import (
    ElevationMap,
    TraversabilityParams,
    build_elevation_map,
    cluster_vertices_by_place,
    compute_traversability,
    crop_cloud,
    merge_elevation_maps,
    remove_dangling_points,
)
from .errors import SessionFormatError
from .geometry import PointCloud, Pose
from .octree import ChangeSet, OccupancyOctree, build_octree, load_octree, octree_merge, update_latest_map
from .optimizer import OptimizationReport, apply_optimized_poses, build_merged_graph, optimize
from .place_recognition import (
    MatcherConfig,
    RelativePoseEstimate,
    build_vocabulary,
    propose_inter_session_edges,
)
from .planner import Path as PlanPath
from .planner import Roadmap, build_prm, plan
from .session import SessionMap, fetch_resource, load_session

VertexKey = tuple[str, int]


def merge_sessions(
    sessions: list[SessionMap], cfg: PipelineConfig
) -> tuple[list[SessionMap], list[RelativePoseEstimate], OptimizationReport]:
    """Place recognition, graph assembly, optimization, pose write-back."""
    inter_edges: list[RelativePoseEstimate] = []
    if len(sessions) > 1:
        dsets = []
        for s in sessions:
            for vid in s.graph.vertex_ids():
                if s.has_resource(vid, "descriptor_set"):
                    ds = fetch_resource(s, vid, "descriptor_set")
                    if len(ds):
                        dsets.append(ds)
        vocab = build_vocabulary(
            dsets, min(cfg.word_count, sum(len(d) for d in dsets)), cfg.place_recognition.seed
        )
        inter_edges = propose_inter_session_edges(sessions, vocab, cfg.place_recognition)
    graph = build_merged_graph(sessions, inter_edges, robust_intra=cfg.robust_intra)
    states, report = optimize(graph, cfg.optimizer)
    merged = apply_optimized_poses(sessions, states, sessions[0].map_frame)
    return merged, inter_edges, report


def session_octree(s: SessionMap, cfg: PipelineConfig) -> OccupancyOctree:
    return build_octree(s, cfg.octree.resolution, cfg.octree.max_range)


def octree_from_path(path: Path | str, cfg: PipelineConfig) -> OccupancyOctree:
    """Accept a saved octree file, a detect-stage output directory, or a
    session directory (whose octree is then built)."""
    path = Path(path)
    if path.is_file():
        return load_octree(path)
    if (path / "latest.oct").is_file():
        return load_octree(path / "latest.oct")
    if (path / "graph.json").is_file():
        return session_octree(load_session(path, cfg.cache_budget), cfg)
    raise SessionFormatError(f"{path}: neither an octree file nor a session directory")


def detect_stage(
    priors: list[OccupancyOctree], current: OccupancyOctree
) -> tuple[OccupancyOctree, ChangeSet]:
    """Latest-map update; with no prior the current octree becomes the map."""
    if not priors:
        empty = OccupancyOctree(current.resolution, current.frame)
        return current, ChangeSet(empty, OccupancyOctree(current.resolution, current.frame))
    prior = priors[0]
    for extra in priors[1:]:
        prior = octree_merge(prior, extra)
    return update_latest_map(prior, current)


def navmap_stage(
    latest_cloud: PointCloud,
    cfg: PipelineConfig,
    sessions: list[SessionMap] | None = None,
    inter_pairs: list[tuple[VertexKey, VertexKey]] | None = None,
) -> ElevationMap:
    """Cluster, filter dangling points, build and merge elevation maps."""
    params = TraversabilityParams(cfg.elevation.stride, cfg.elevation.step_height)
    pieces: list[tuple[str, PointCloud]] = []
    if sessions:
        clusters = cluster_vertices_by_place(sessions, inter_pairs or [])
        for cl in clusters:
            piece = crop_cloud(latest_cloud, cl.aabb_min, cl.aabb_max, cfg.elevation.crop_pad)
            if len(piece):
                pieces.append((cl.label, piece))
    if not pieces:
        pieces = [("", latest_cloud)]
    maps = []
    for label, piece in pieces:
        filtered = remove_dangling_points(
            piece, cfg.elevation.dangling_resolutions, cfg.elevation.dangling_gap
        )
        m = build_elevation_map(filtered, cfg.elevation.resolution, label)
        if m.heights.size:
            maps.append(m)
    if not maps:
        empty = np.zeros((0, 0))
        return compute_traversability(
            ElevationMap(np.zeros(2), cfg.elevation.resolution, empty, empty.copy(),
                         np.zeros((0, 0), dtype=np.int64)),
            params,
        )
    return merge_elevation_maps(maps, params)


def plan_stage(
    navmap: ElevationMap, start, goal, cfg: PipelineConfig
) -> tuple[Roadmap, PlanPath | None]:
    rm = build_prm(navmap, cfg.planner)
    return rm, plan(rm, navmap, start, goal)


# ---------------------------------------------------------------------------
# serialization helpers for stage artifacts


def _pose7(p: Pose) -> list[float]:
    return [float(x) for x in (*p.rotation, *p.translation)]


def inter_edges_to_json(edges: list[RelativePoseEstimate]) -> list[dict]:
    return [
        {
            "query": list(e.query_vertex),
            "match": list(e.match_vertex),
            "inliers": e.inlier_count,
            "similarity": e.similarity,
            "pose": _pose7(e.pose),
            "covariance": [float(x) for x in e.covariance.reshape(36)],
        }
        for e in edges
    ]


def inter_edges_from_json(items: list[dict]) -> list[RelativePoseEstimate]:
    out = []
    for d in items:
        vals = d["pose"]
        pose = Pose(np.asarray(vals[:4]), np.asarray(vals[4:]))
        out.append(
            RelativePoseEstimate(
                pose=pose,
                inlier_count=int(d["inliers"]),
                covariance=np.asarray(d["covariance"], dtype=np.float64).reshape(6, 6),
                query_vertex=(d["query"][0], int(d["query"][1])),
                match_vertex=(d["match"][0], int(d["match"][1])),
                similarity=float(d["similarity"]),
            )
        )
    return out


def save_gt_poses(path: Path, session_id: str, poses: list[Pose]):
    payload = {
        "session_id": session_id,
        "frame": "world",
        "poses": {str(i): _pose7(p) for i, p in enumerate(poses)},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_gt_poses(path: Path | str) -> tuple[str, dict[int, Pose]]:
    raw = json.loads(Path(path).read_text())
    poses = {}
    for k, vals in raw["poses"].items():
        poses[int(k)] = Pose(np.asarray(vals[:4]), np.asarray(vals[4:]), raw.get("frame", "world"), "")
    return raw["session_id"], poses
