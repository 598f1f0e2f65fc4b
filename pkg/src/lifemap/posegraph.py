"""Pose-graph data model: vertices with poses and labels, edges with relative
pose measurements and 6x6 covariances."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import GraphValidationError
from .geometry import Pose


class EdgeKind(str, Enum):
    ODOMETRY = "odometry"
    INTRA_LOOP = "intra_loop"
    INTER_LOOP = "inter_loop"


@dataclass(frozen=True)
class Vertex:
    id: int
    pose: Pose  # map <- body
    place_label: str = ""
    resources: tuple[str, ...] = ()  # resource kinds available for this vertex

    def with_pose(self, pose: Pose) -> "Vertex":
        return Vertex(self.id, pose, self.place_label, self.resources)


@dataclass(frozen=True)
class Edge:
    from_id: int
    to_id: int
    relative: Pose  # T_{b_from, b_to}
    covariance: np.ndarray  # 6x6 SPD, rotation block first
    kind: EdgeKind

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=np.float64)
        if cov.shape != (6, 6):
            raise GraphValidationError(f"covariance must be 6x6, got {cov.shape}")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "kind", EdgeKind(self.kind))


@dataclass
class PoseGraph:
    vertices: dict[int, Vertex] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def add_vertex(self, v: Vertex):
        if v.id in self.vertices:
            raise GraphValidationError(f"duplicate vertex id {v.id}")
        self.vertices[v.id] = v

    def add_edge(self, e: Edge):
        self.edges.append(e)

    def vertex_ids(self) -> list[int]:
        return sorted(self.vertices)

    def validate(self):
        """Check endpoint existence, covariance SPD-ness, odometry connectivity."""
        for e in self.edges:
            if e.from_id not in self.vertices or e.to_id not in self.vertices:
                raise GraphValidationError(
                    f"edge ({e.from_id}, {e.to_id}) references a missing vertex"
                )
            if np.max(np.abs(e.covariance - e.covariance.T)) > 1e-9:
                raise GraphValidationError(
                    f"edge ({e.from_id}, {e.to_id}) covariance is not symmetric"
                )
            try:
                np.linalg.cholesky(e.covariance)
            except np.linalg.LinAlgError:
                raise GraphValidationError(
                    f"edge ({e.from_id}, {e.to_id}) covariance is not positive definite"
                ) from None
        if len(self.vertices) > 1:
            seen = self._odometry_component()
            if seen != set(self.vertices):
                missing = sorted(set(self.vertices) - seen)
                raise GraphValidationError(
                    f"odometry edges do not connect vertices {missing}"
                )

    def _odometry_component(self) -> set[int]:
        adj: dict[int, list[int]] = {vid: [] for vid in self.vertices}
        for e in self.edges:
            if e.kind == EdgeKind.ODOMETRY:
                adj[e.from_id].append(e.to_id)
                adj[e.to_id].append(e.from_id)
        start = min(self.vertices)
        seen = {start}
        stack = [start]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen
