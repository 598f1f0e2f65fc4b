"""On-disk session format and lazy resource access.

A session directory holds the pose graph (`graph.json`), session metadata
(`meta.json`), per-vertex point-cloud submaps (`submaps/<id>.ply`, binary
little-endian xyz float32) and descriptor sets (`descriptors/<id>.bin`).
Only the graph and metadata are parsed at load time; submaps and descriptors
are decoded on demand through a bounded, internally synchronized LRU cache.
"""

from __future__ import annotations

import json
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ResourceNotFoundError, SessionFormatError
from .geometry import PointCloud, Pose
from .posegraph import Edge, EdgeKind, PoseGraph, Vertex

_DESC_MAGIC = b"LMDS"
_DESC_VERSION = 1

RESOURCE_KINDS = ("submap", "descriptor_set")


def vertex_frame(session_id: str, vertex_id: int) -> str:
    return f"{session_id}/body/{vertex_id}"


def map_frame_name(session_id: str) -> str:
    return f"{session_id}/map"


@dataclass(frozen=True)
class DescriptorSet:
    """Per-vertex local features with their 3D landmark points.

    `features` are fixed-length real vectors; `landmarks` are the matching
    3D points in the vertex frame. The sparse `global_descriptor` (word id ->
    weight, L2-normalized) is attached once a vocabulary is available.
    """

    features: np.ndarray  # (N, D) float32
    landmarks: np.ndarray  # (N, 3) float64, vertex frame
    global_descriptor: dict[int, float] | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float32))
        lms = np.ascontiguousarray(np.asarray(self.landmarks, dtype=np.float64))
        if feats.ndim != 2:
            raise ValueError("features must be (N, D)")
        if lms.shape != (feats.shape[0], 3):
            raise ValueError("landmarks must be (N, 3) matching features")
        if not np.all(np.isfinite(lms)) or not np.all(np.isfinite(feats)):
            raise ValueError("non-finite descriptor data")
        if self.global_descriptor is not None and self.global_descriptor:
            norm = np.sqrt(sum(w * w for w in self.global_descriptor.values()))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError("global descriptor must be L2-normalized")
        feats.setflags(write=False)
        lms.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "landmarks", lms)

    def __len__(self) -> int:
        return self.features.shape[0]

    def with_global(self, g: dict[int, float]) -> "DescriptorSet":
        return replace(self, global_descriptor=g)


class ResourceCache:
    """LRU cache with a fixed entry budget; safe for concurrent readers."""

    def __init__(self, budget: int = 32):
        if budget < 1:
            raise ValueError("cache budget must be >= 1")
        self.budget = budget
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def get_or_load(self, key, loader: Callable):
        with self._lock:
            if key in self._entries:
                self.hits += 1
                self._entries.move_to_end(key)
                return self._entries[key]
        value = loader()
        with self._lock:
            if key not in self._entries:
                self.misses += 1
                self._entries[key] = value
                while len(self._entries) > self.budget:
                    self._entries.popitem(last=False)
                    self.evictions += 1
            return self._entries[key]

    def clear(self):
        with self._lock:
            self._entries.clear()


@dataclass
class SessionMap:
    """A single recording: pose graph plus lazily loaded per-vertex resources."""

    session_id: str
    map_frame: str
    graph: PoseGraph
    sensor_offset: np.ndarray | None = None  # sensor origin in the body frame
    root: Path | None = None
    resource_index: dict[int, dict[str, Path]] = field(default_factory=dict)
    cache: ResourceCache = field(default_factory=ResourceCache)
    _memory_resources: dict[tuple[int, str], object] = field(default_factory=dict)

    def __post_init__(self):
        if self.sensor_offset is not None:
            self.sensor_offset = np.asarray(self.sensor_offset, dtype=np.float64).reshape(3)

    def vertex_frame(self, vertex_id: int) -> str:
        return vertex_frame(self.session_id, vertex_id)

    def attach_resource(self, vertex_id: int, kind: str, value):
        """Attach an in-memory resource (used by generators before saving)."""
        if kind not in RESOURCE_KINDS:
            raise ValueError(f"unknown resource kind {kind!r}")
        if vertex_id not in self.graph.vertices:
            raise SessionFormatError(f"resource for unknown vertex {vertex_id}")
        self._memory_resources[(vertex_id, kind)] = value
        v = self.graph.vertices[vertex_id]
        if kind not in v.resources:
            self.graph.vertices[vertex_id] = replace(v, resources=tuple(sorted((*v.resources, kind))))

    def has_resource(self, vertex_id: int, kind: str) -> bool:
        if (vertex_id, kind) in self._memory_resources:
            return True
        return kind in self.resource_index.get(vertex_id, {})

    def with_updated_poses(self, poses: dict[int, Pose], map_frame: str) -> "SessionMap":
        """Copy with rewritten vertex poses; resources stay shared."""
        graph = PoseGraph(
            {vid: v.with_pose(poses[vid]) for vid, v in self.graph.vertices.items()},
            list(self.graph.edges),
        )
        return SessionMap(
            session_id=self.session_id,
            map_frame=map_frame,
            graph=graph,
            sensor_offset=self.sensor_offset,
            root=self.root,
            resource_index=self.resource_index,
            cache=self.cache,
            _memory_resources=self._memory_resources,
        )


def write_ply(path: Path, points: np.ndarray):
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {points.shape[0]}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def read_ply(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise SessionFormatError(f"{path}: not a PLY file")
        count = None
        fmt = None
        while True:
            line = f.readline()
            if not line:
                raise SessionFormatError(f"{path}: truncated PLY header")
            line = line.strip()
            if line.startswith(b"format"):
                fmt = line.split()[1]
            elif line.startswith(b"element vertex"):
                count = int(line.split()[2])
            elif line == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise SessionFormatError(f"{path}: unsupported PLY format {fmt!r}")
        if count is None:
            raise SessionFormatError(f"{path}: missing vertex element")
        data = f.read(count * 12)
        if len(data) != count * 12:
            raise SessionFormatError(f"{path}: truncated PLY payload")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 3).astype(np.float64)


def write_descriptor_set(path: Path, ds: DescriptorSet):
    dim = ds.features.shape[1] if len(ds) else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _DESC_MAGIC, _DESC_VERSION, len(ds), dim))
        f.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.landmarks, dtype="<f4").tobytes())


def read_descriptor_set(path: Path) -> DescriptorSet:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise SessionFormatError(f"{path}: truncated descriptor header")
        magic, version, count, dim = struct.unpack("<4sIII", header)
        if magic != _DESC_MAGIC:
            raise SessionFormatError(f"{path}: bad descriptor magic {magic!r}")
        if version != _DESC_VERSION:
            raise SessionFormatError(f"{path}: unsupported descriptor version {version}")
        feats = np.frombuffer(f.read(count * dim * 4), dtype="<f4")
        lms = np.frombuffer(f.read(count * 12), dtype="<f4")
    if feats.size != count * dim or lms.size != count * 3:
        raise SessionFormatError(f"{path}: truncated descriptor payload")
    return DescriptorSet(feats.reshape(count, dim), lms.reshape(count, 3).astype(np.float64))


def _pose_to_list(p: Pose) -> list[float]:
    return [float(x) for x in (*p.rotation, *p.translation)]


def _pose_from_list(vals, parent_frame: str, child_frame: str) -> Pose:
    vals = list(vals)
    if len(vals) != 7:
        raise SessionFormatError(f"pose must have 7 values [qw,qx,qy,qz,tx,ty,tz], got {len(vals)}")
    return Pose(np.array(vals[:4]), np.array(vals[4:]), parent_frame, child_frame)


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_session(s: SessionMap, path: Path | str):
    """Write a session directory; overwrites files already present."""
    path = Path(path)
    (path / "submaps").mkdir(parents=True, exist_ok=True)
    (path / "descriptors").mkdir(parents=True, exist_ok=True)

    vertices = []
    for vid in s.graph.vertex_ids():
        v = s.graph.vertices[vid]
        vertices.append({"id": vid, "pose": _pose_to_list(v.pose), "place_label": v.place_label})
    edges = []
    for e in s.graph.edges:
        edges.append(
            {
                "from": e.from_id,
                "to": e.to_id,
                "pose": _pose_to_list(e.relative),
                "covariance": [float(x) for x in e.covariance.reshape(36)],
                "kind": e.kind.value,
            }
        )
    _dump_json(path / "graph.json", {"vertices": vertices, "edges": edges})
    offset = None if s.sensor_offset is None else [float(x) for x in s.sensor_offset]
    _dump_json(
        path / "meta.json",
        {"session_id": s.session_id, "map_frame": s.map_frame, "sensor_offset": offset},
    )

    for vid in s.graph.vertex_ids():
        for kind, sub, writer in (
            ("submap", "submaps", lambda p, r: write_ply(p, r.points)),
            ("descriptor_set", "descriptors", write_descriptor_set),
        ):
            ext = "ply" if kind == "submap" else "bin"
            target = path / sub / f"{vid}.{ext}"
            mem = s._memory_resources.get((vid, kind))
            if mem is not None:
                writer(target, mem)
            elif kind in s.resource_index.get(vid, {}):
                src = s.resource_index[vid][kind]
                if src.resolve() != target.resolve():
                    target.write_bytes(src.read_bytes())


def load_session(path: Path | str, cache_budget: int = 32) -> SessionMap:
    """Parse graph and metadata; index resources without decoding them."""
    path = Path(path)
    graph_file = path / "graph.json"
    meta_file = path / "meta.json"
    if not graph_file.is_file():
        raise SessionFormatError(f"missing graph file {graph_file}")
    if not meta_file.is_file():
        raise SessionFormatError(f"missing meta file {meta_file}")
    try:
        raw = json.loads(graph_file.read_text())
        meta = json.loads(meta_file.read_text())
    except json.JSONDecodeError as e:
        raise SessionFormatError(f"malformed JSON under {path}: {e}") from None

    session_id = meta.get("session_id")
    map_frame = meta.get("map_frame")
    if not session_id or not map_frame:
        raise SessionFormatError(f"{meta_file}: session_id and map_frame are required")
    raw_offset = meta.get("sensor_offset")
    offset = None if raw_offset is None else np.asarray(raw_offset, dtype=np.float64)

    graph = PoseGraph()
    for item in raw.get("vertices", []):
        vid = int(item["id"])
        pose = _pose_from_list(item["pose"], map_frame, vertex_frame(session_id, vid))
        try:
            graph.add_vertex(Vertex(vid, pose, item.get("place_label", "")))
        except Exception as e:
            raise SessionFormatError(f"{graph_file}: {e}") from None
    for item in raw.get("edges", []):
        a, b = int(item["from"]), int(item["to"])
        rel = _pose_from_list(
            item["pose"], vertex_frame(session_id, a), vertex_frame(session_id, b)
        )
        cov = np.asarray(item["covariance"], dtype=np.float64)
        if cov.size != 36:
            raise SessionFormatError(f"{graph_file}: covariance must have 36 values")
        graph.add_edge(Edge(a, b, rel, cov.reshape(6, 6), EdgeKind(item["kind"])))
    try:
        graph.validate()
    except Exception as e:
        raise SessionFormatError(f"{graph_file}: {e}") from None

    index: dict[int, dict[str, Path]] = {}
    for sub, kind, ext in (("submaps", "submap", "ply"), ("descriptors", "descriptor_set", "bin")):
        d = path / sub
        if not d.is_dir():
            continue
        for f in sorted(d.glob(f"*.{ext}")):
            try:
                vid = int(f.stem)
            except ValueError:
                raise SessionFormatError(f"{f}: resource name is not a vertex id") from None
            if vid not in graph.vertices:
                raise SessionFormatError(f"{f}: resource for unknown vertex {vid}")
            index.setdefault(vid, {})[kind] = f

    for vid, kinds in index.items():
        v = graph.vertices[vid]
        graph.vertices[vid] = replace(v, resources=tuple(sorted(kinds)))

    return SessionMap(
        session_id=session_id,
        map_frame=map_frame,
        graph=graph,
        sensor_offset=offset,
        root=path,
        resource_index=index,
        cache=ResourceCache(cache_budget),
    )


def fetch_resource(s: SessionMap, vertex_id: int, kind: str):
    """Decode one resource, hitting the session's LRU cache."""
    if kind not in RESOURCE_KINDS:
        raise ResourceNotFoundError(f"unknown resource kind {kind!r}")
    mem = s._memory_resources.get((vertex_id, kind))
    if mem is not None:
        return mem
    paths = s.resource_index.get(vertex_id, {})
    if kind not in paths:
        raise ResourceNotFoundError(
            f"session {s.session_id!r} has no {kind} for vertex {vertex_id}"
        )
    path = paths[kind]
    if kind == "submap":
        return s.cache.get_or_load(
            (vertex_id, kind),
            lambda: PointCloud(read_ply(path), s.vertex_frame(vertex_id)),
        )
    return s.cache.get_or_load((vertex_id, kind), lambda: read_descriptor_set(path))
