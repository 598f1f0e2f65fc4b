"""Occupancy voxel trees and the differencing algebra for change detection.

States are binary: a stored voxel is occupied or free, an absent voxel is
unknown. Building marks every voxel traversed by a sensor ray as free and the
endpoint voxel as occupied, with occupied overriding free on conflict, so the
result is independent of insertion order. Differencing is defined only over
voxels explicitly known in both trees, which keeps non-overlapping areas
between sessions out of the change sets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import SessionFormatError
from .geometry import PointCloud, transform_points
from .session import SessionMap, fetch_resource

_COORD_BIAS = 1 << 20  # voxel indices must fit [-2^20, 2^20)
_OCT_MAGIC = b"LMOC"
_OCT_VERSION = 1


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    if np.any(np.abs(ijk) >= _COORD_BIAS):
        raise ValueError("voxel index out of packable range")
    return (
        ((ijk[:, 0] + _COORD_BIAS) << 42)
        | ((ijk[:, 1] + _COORD_BIAS) << 21)
        | (ijk[:, 2] + _COORD_BIAS)
    )


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    mask = (1 << 21) - 1
    out = np.empty((keys.size, 3), dtype=np.int64)
    out[:, 0] = (keys >> 42) & mask
    out[:, 1] = (keys >> 21) & mask
    out[:, 2] = keys & mask
    return out - _COORD_BIAS


class OccupancyOctree:
    """Fixed-resolution voxel map with occupied/free leaves."""

    __slots__ = ("resolution", "frame", "occupied", "free")

    def __init__(self, resolution: float, frame: str = "",
                 occupied: set[int] | None = None, free: set[int] | None = None):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.frame = frame
        self.occupied: set[int] = set() if occupied is None else set(occupied)
        self.free: set[int] = (set() if free is None else set(free)) - self.occupied

    def voxel_keys(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pack_keys(np.floor(pts / self.resolution).astype(np.int64))

    def voxel_centers(self, keys) -> np.ndarray:
        arr = np.fromiter(keys, dtype=np.int64) if isinstance(keys, (set, frozenset)) else np.asarray(keys, dtype=np.int64)
        return (unpack_keys(np.sort(arr)) + 0.5) * self.resolution

    def state(self, point: np.ndarray) -> str:
        key = int(self.voxel_keys(np.asarray(point).reshape(1, 3))[0])
        if key in self.occupied:
            return "occupied"
        if key in self.free:
            return "free"
        return "unknown"

    def occupied_centers(self) -> np.ndarray:
        if not self.occupied:
            return np.zeros((0, 3))
        return self.voxel_centers(self.occupied)

    def occupied_cloud(self) -> PointCloud:
        return PointCloud(self.occupied_centers(), self.frame)

    def counts(self) -> tuple[int, int]:
        return len(self.occupied), len(self.free)

    def _check_compatible(self, other: "OccupancyOctree"):
        if abs(self.resolution - other.resolution) > 1e-12:
            raise ValueError(
                f"resolution mismatch: {self.resolution} vs {other.resolution}"
            )
        if self.frame != other.frame:
            raise ValueError(f"frame mismatch: {self.frame!r} vs {other.frame!r}")


def ray_traversal_keys(origins: np.ndarray, ends: np.ndarray, resolution: float
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Exact integer voxel walk from each origin to each endpoint.

    Returns (traversed, endpoints): packed keys of all voxels each ray passes
    through before its endpoint voxel, and the endpoint voxel keys.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    cur = np.floor(origins / resolution).astype(np.int64)
    last = np.floor(ends / resolution).astype(np.int64)
    endpoints = pack_keys(last)
    if origins.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), endpoints

    d = ends - origins
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_boundary = (cur + (step > 0)) * resolution
        t_max = np.where(d != 0.0, (next_boundary - origins) / d, np.inf)
        t_delta = np.where(d != 0.0, resolution / np.abs(d), np.inf)

    alive = np.any(cur != last, axis=1)
    visited = [pack_keys(cur[alive])]
    idx = np.nonzero(alive)[0]
    cur = cur[alive]
    last = last[alive]
    t_max = t_max[alive]
    t_delta = t_delta[alive]
    step = step[alive]

    # exact walks terminate at the endpoint voxel; the bound only guards
    # against pathological floating-point stalls
    max_steps = int(np.abs(last - cur).sum(axis=1).max(initial=0)) + 4
    for _ in range(max_steps):
        if idx.size == 0:
            break
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(idx.size)
        cur[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        arrived = np.all(cur == last, axis=1)
        ongoing = ~arrived
        if ongoing.any():
            visited.append(pack_keys(cur[ongoing]))
        idx = idx[ongoing]
        cur = cur[ongoing]
        last = last[ongoing]
        t_max = t_max[ongoing]
        t_delta = t_delta[ongoing]
        step = step[ongoing]

    traversed = np.unique(np.concatenate(visited)) if visited else np.zeros(0, np.int64)
    return traversed, endpoints


def build_octree(s: SessionMap, resolution: float, max_range: float) -> OccupancyOctree:
    """Ray-carve one session's submaps into an occupancy tree in its map frame."""
    if s.sensor_offset is None:
        raise SessionFormatError(f"session {s.session_id!r} has no sensor offset")
    tree = OccupancyOctree(resolution, s.map_frame)
    occ: set[int] = set()
    free: set[int] = set()
    for vid in s.graph.vertex_ids():
        if not s.has_resource(vid, "submap"):
            continue
        v = s.graph.vertices[vid]
        submap = fetch_resource(s, vid, "submap")
        if len(submap) == 0:
            continue
        origin = v.pose.apply(s.sensor_offset.reshape(1, 3))[0]
        pts = transform_points(v.pose, submap).points
        dist = np.linalg.norm(pts - origin, axis=1)
        pts = pts[dist <= max_range]
        if pts.shape[0] == 0:
            continue
        origins = np.broadcast_to(origin, pts.shape)
        traversed, endpoints = ray_traversal_keys(origins, pts, resolution)
        occ.update(endpoints.tolist())
        free.update(traversed.tolist())
    tree.occupied = occ
    tree.free = free - occ
    return tree


def octree_diff(a: OccupancyOctree, b: OccupancyOctree) -> OccupancyOctree:
    """Voxels occupied in `a` and explicitly free in `b` (unknown excluded)."""
    a._check_compatible(b)
    return OccupancyOctree(a.resolution, a.frame, occupied=a.occupied & b.free)


def octree_delete(a: OccupancyOctree, r: OccupancyOctree) -> OccupancyOctree:
    """Remove r's occupied voxels from a's occupied set; free space untouched."""
    a._check_compatible(r)
    return OccupancyOctree(a.resolution, a.frame, occupied=a.occupied - r.occupied, free=a.free)


def octree_merge(a: OccupancyOctree, b: OccupancyOctree) -> OccupancyOctree:
    """Union of nodes; occupied wins over free on conflict."""
    a._check_compatible(b)
    occ = a.occupied | b.occupied
    return OccupancyOctree(a.resolution, a.frame, occupied=occ, free=(a.free | b.free) - occ)


@dataclass(frozen=True)
class ChangeSet:
    removed: OccupancyOctree
    added: OccupancyOctree

    def is_empty(self) -> bool:
        return not self.removed.occupied and not self.added.occupied


def update_latest_map(prior: OccupancyOctree, current: OccupancyOctree
                      ) -> tuple[OccupancyOctree, ChangeSet]:
    """Difference-then-merge update keeping the newest observed state."""
    prior._check_compatible(current)
    removed = octree_diff(prior, current)
    added = octree_diff(current, prior)
    latest = octree_merge(octree_delete(prior, removed), current)
    return latest, ChangeSet(removed, added)


def extract_change_clouds(c: ChangeSet) -> tuple[PointCloud, PointCloud]:
    """One point per changed voxel, at the voxel center."""
    return c.removed.occupied_cloud(), c.added.occupied_cloud()


@dataclass(frozen=True)
class ChangeMetrics:
    true_positives: int
    false_positives: int
    matched_ground_truth: int
    total_ground_truth: int
    precision: float
    recall: float
    f_score: float
    chamfer: float
    recall_defined: bool = True
    precision_defined: bool = True

    def as_dict(self) -> dict:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "matched_ground_truth": self.matched_ground_truth,
            "total_ground_truth": self.total_ground_truth,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "chamfer": self.chamfer,
            "recall_defined": self.recall_defined,
            "precision_defined": self.precision_defined,
        }


def evaluate_changes(
    pred: ChangeSet,
    gt_changed: PointCloud,
    gt_static: PointCloud,
    threshold: float = 0.05,
) -> ChangeMetrics:
    """Classification metrics against annotated changed/static surfaces.

    A predicted change point is a true positive when its nearest annotated
    point within `threshold` belongs to the changed set; recall counts the
    changed points that any prediction lands within `threshold` of. Chamfer
    is the symmetric mean nearest-neighbor distance between the predicted
    change cloud and the changed ground truth.
    """
    removed, added = extract_change_clouds(pred)
    pred_pts = np.concatenate([removed.points, added.points], axis=0)

    n_pred = pred_pts.shape[0]
    n_gt = gt_changed.points.shape[0]

    tp = fp = 0
    if n_pred and n_gt:
        d_changed, _ = cKDTree(gt_changed.points).query(pred_pts)
    else:
        d_changed = np.full(n_pred, np.inf)
    if n_pred and gt_static.points.shape[0]:
        d_static, _ = cKDTree(gt_static.points).query(pred_pts)
    else:
        d_static = np.full(n_pred, np.inf)
    if n_pred:
        is_tp = (d_changed <= threshold) & (d_changed <= d_static)
        tp = int(is_tp.sum())
        fp = n_pred - tp

    matched = 0
    if n_gt and n_pred:
        d_gt, _ = cKDTree(pred_pts).query(gt_changed.points)
        matched = int((d_gt <= threshold).sum())

    precision_defined = n_pred > 0
    recall_defined = n_gt > 0
    precision = tp / n_pred if precision_defined else float("nan")
    recall = matched / n_gt if recall_defined else float("nan")
    if precision_defined and recall_defined and (precision + recall) > 0:
        f_score = 2.0 * precision * recall / (precision + recall)
    else:
        f_score = float("nan")

    if n_pred and n_gt:
        chamfer = 0.5 * (float(d_changed.mean()) + float(d_gt.mean()))
    else:
        chamfer = float("nan")

    return ChangeMetrics(
        true_positives=tp,
        false_positives=fp,
        matched_ground_truth=matched,
        total_ground_truth=n_gt,
        precision=precision,
        recall=recall,
        f_score=f_score,
        chamfer=chamfer,
        recall_defined=recall_defined,
        precision_defined=precision_defined,
    )


def save_octree(tree: OccupancyOctree, path: Path | str):
    path = Path(path)
    frame = tree.frame.encode("utf-8")
    occ = np.sort(np.fromiter(tree.occupied, dtype=np.int64, count=len(tree.occupied)))
    free = np.sort(np.fromiter(tree.free, dtype=np.int64, count=len(tree.free)))
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIdI", _OCT_MAGIC, _OCT_VERSION, tree.resolution, len(frame)))
        f.write(frame)
        f.write(struct.pack("<QQ", occ.size, free.size))
        f.write(occ.astype("<i8").tobytes())
        f.write(free.astype("<i8").tobytes())


def load_octree(path: Path | str) -> OccupancyOctree:
    path = Path(path)
    with open(path, "rb") as f:
        magic, version, resolution, frame_len = struct.unpack("<4sIdI", f.read(20))
        if magic != _OCT_MAGIC:
            raise SessionFormatError(f"{path}: not an octree file")
        if version != _OCT_VERSION:
            raise SessionFormatError(f"{path}: unsupported octree version {version}")
        frame = f.read(frame_len).decode("utf-8")
        n_occ, n_free = struct.unpack("<QQ", f.read(16))
        occ = np.frombuffer(f.read(n_occ * 8), dtype="<i8")
        free = np.frombuffer(f.read(n_free * 8), dtype="<i8")
    if occ.size != n_occ or free.size != n_free:
        raise SessionFormatError(f"{path}: truncated octree payload")
    return OccupancyOctree(resolution, frame, occupied=set(occ.tolist()), free=set(free.tolist()))


def summary_report(trees: dict[str, OccupancyOctree]) -> str:
    """Voxel-count table for a set of named trees."""
    lines = ["octree summary", f"  {'name':<12} {'occupied':>10} {'free':>12}"]
    for name in trees:
        occ, free = trees[name].counts()
        lines.append(f"  {name:<12} {occ:>10} {free:>12}")
    return "\n".join(lines) + "\n"
