"""Probabilistic roadmap planning over traversability-scored elevation maps.

Nodes are rejection-sampled robot positions whose axis-aligned footprint lies
entirely on known, sufficiently traversable cells; edges connect nearby nodes
whose straight segment passes the same footprint check at half-cell steps.
Queries attach start and goal to nearby roadmap nodes and run uniform-cost
search. The robot box height is carried in the parameters but takes no part
in the 2D validity check (overhang clearance is out of scope for cell maps).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .elevation import ElevationMap
from .errors import InvalidEndpointError


@dataclass(frozen=True)
class RobotBox:
    x: float = 0.5
    y: float = 0.5
    z: float = 1.8

    def __post_init__(self):
        if self.x <= 0 or self.y <= 0 or self.z <= 0:
            raise ValueError("robot box dimensions must be positive")


@dataclass(frozen=True)
class PrmParams:
    samples: int = 2000
    connection_radius: float = 1.0
    min_traversability: float = 0.5
    box: RobotBox = field(default_factory=RobotBox)
    seed: int = 0


@dataclass(frozen=True)
class Path:
    waypoints: np.ndarray  # (K, 2)
    total_length: float


@dataclass
class Roadmap:
    nodes: np.ndarray  # (N, 2)
    edges: list[tuple[int, int, float]]
    params: PrmParams

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(self.nodes))}
        for i, j, w in self.edges:
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def component_labels(self) -> np.ndarray:
        labels = np.full(len(self.nodes), -1, dtype=np.int64)
        adj = self.adjacency()
        comp = 0
        for seed_node in range(len(self.nodes)):
            if labels[seed_node] >= 0:
                continue
            stack = [seed_node]
            labels[seed_node] = comp
            while stack:
                for nxt, _ in adj[stack.pop()]:
                    if labels[nxt] < 0:
                        labels[nxt] = comp
                        stack.append(nxt)
            comp += 1
        return labels


class FootprintChecker:
    """Integral-image lookup answering: is every cell under the footprint
    known and traversable at or above the threshold?"""

    def __init__(self, m: ElevationMap, box: RobotBox, t_min: float):
        self.map = m
        self.half = np.array([box.x / 2.0, box.y / 2.0])
        self.t_min = t_min
        valid = np.isfinite(m.traversability) & (m.traversability >= t_min)
        self.any_valid = bool(valid.any())
        inv = (~valid).astype(np.int64)
        h, w = inv.shape
        self._prefix = np.zeros((h + 1, w + 1), dtype=np.int64)
        self._prefix[1:, 1:] = inv.cumsum(axis=0).cumsum(axis=1)
        self._shape = (h, w)

    def points_valid(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        m = self.map
        h, w = self._shape
        if h == 0 or w == 0:
            return np.zeros(len(xy), dtype=bool)
        lo = m.cell_of(xy - self.half)
        hi = m.cell_of(xy + self.half)
        inside = (
            (lo[:, 0] >= 0) & (lo[:, 1] >= 0) & (hi[:, 0] < w) & (hi[:, 1] < h)
        )
        out = np.zeros(len(xy), dtype=bool)
        if inside.any():
            x0, y0 = lo[inside, 0], lo[inside, 1]
            x1, y1 = hi[inside, 0] + 1, hi[inside, 1] + 1
            p = self._prefix
            bad = p[y1, x1] - p[y0, x1] - p[y1, x0] + p[y0, x0]
            out[inside] = bad == 0
        return out

    def segments_valid(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Vectorized half-cell-step sweep over many segments at once."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        step = self.map.resolution / 2.0
        lengths = np.linalg.norm(b - a, axis=1)
        n_samples = np.maximum(np.ceil(lengths / step).astype(np.int64) + 1, 2)
        starts = np.concatenate([[0], np.cumsum(n_samples)[:-1]])
        total = int(n_samples.sum())
        seg = np.repeat(np.arange(len(a)), n_samples)
        within = np.arange(total) - np.repeat(starts, n_samples)
        frac = within / np.repeat(n_samples - 1, n_samples)
        pts = a[seg] + frac[:, None] * (b - a)[seg]
        ok = self.points_valid(pts)
        return np.bitwise_and.reduceat(ok, starts)


def collision_free(
    m: ElevationMap, a, b, box: RobotBox, t_min: float,
    checker: FootprintChecker | None = None,
) -> bool:
    """Footprint sweep along the straight segment; false on any unknown cell."""
    checker = checker or FootprintChecker(m, box, t_min)
    return bool(checker.segments_valid(np.asarray(a)[None, :], np.asarray(b)[None, :])[0])


def build_prm(m: ElevationMap, params: PrmParams) -> Roadmap:
    """Rejection-sample valid nodes, connect collision-free pairs in radius."""
    checker = FootprintChecker(m, params.box, params.min_traversability)
    if not checker.any_valid or m.heights.size == 0:
        return Roadmap(np.zeros((0, 2)), [], params)

    rng = np.random.default_rng(params.seed)
    lo, hi = m.extent()
    nodes: list[np.ndarray] = []
    attempts = 0
    max_attempts = max(1000, 100 * params.samples)
    needed = params.samples
    while needed > 0 and attempts < max_attempts:
        chunk = min(max(4 * needed, 256), max_attempts - attempts)
        cand = rng.uniform(lo, hi, size=(chunk, 2))
        attempts += chunk
        good = cand[checker.points_valid(cand)]
        if good.shape[0] > needed:
            good = good[:needed]
        if good.shape[0]:
            nodes.append(good)
            needed -= good.shape[0]
    node_arr = np.concatenate(nodes, axis=0) if nodes else np.zeros((0, 2))

    edges: list[tuple[int, int, float]] = []
    if len(node_arr) > 1:
        pairs = sorted(cKDTree(node_arr).query_pairs(params.connection_radius))
        if pairs:
            pa = np.array([p[0] for p in pairs])
            pb = np.array([p[1] for p in pairs])
            ok = checker.segments_valid(node_arr[pa], node_arr[pb])
            lengths = np.linalg.norm(node_arr[pa] - node_arr[pb], axis=1)
            edges = [
                (int(i), int(j), float(l))
                for i, j, l, good in zip(pa, pb, lengths, ok)
                if good and l > 0.0
            ]
    return Roadmap(node_arr, edges, params)


def _endpoint_cell_ok(m: ElevationMap, xy: np.ndarray, t_min: float, name: str):
    cell = m.cell_of(xy[None, :])[0]
    h, w = m.shape
    if not (0 <= cell[0] < w and 0 <= cell[1] < h):
        raise InvalidEndpointError(f"{name} {xy.tolist()} is outside the map")
    t = m.traversability[cell[1], cell[0]]
    if not np.isfinite(m.heights[cell[1], cell[0]]) or not np.isfinite(t):
        raise InvalidEndpointError(f"{name} {xy.tolist()} lies on an unknown cell")
    if t < t_min:
        raise InvalidEndpointError(f"{name} {xy.tolist()} lies on an untraversable cell")


def plan(rm: Roadmap, m: ElevationMap, start, goal) -> Path | None:
    """Shortest roadmap path by edge length; None when no route exists."""
    start = np.asarray(start, dtype=np.float64).reshape(2)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    t_min = rm.params.min_traversability
    _endpoint_cell_ok(m, start, t_min, "start")
    _endpoint_cell_ok(m, goal, t_min, "goal")
    if np.linalg.norm(goal - start) < 1e-12:
        return Path(start[None, :].copy(), 0.0)
    if len(rm.nodes) == 0:
        return None

    checker = FootprintChecker(m, rm.params.box, t_min)
    tree = cKDTree(rm.nodes)
    adj = rm.adjacency()
    n = len(rm.nodes)
    s_idx, g_idx = n, n + 1
    adj[s_idx] = []
    adj[g_idx] = []
    for idx, xy in ((s_idx, start), (g_idx, goal)):
        near = sorted(tree.query_ball_point(xy, rm.params.connection_radius))
        if near:
            ok = checker.segments_valid(
                np.repeat(xy[None, :], len(near), axis=0), rm.nodes[near]
            )
            for node, good in zip(near, ok):
                if good:
                    w = float(np.linalg.norm(rm.nodes[node] - xy))
                    adj[idx].append((node, w))
                    adj[node].append((idx, w))

    dist = {s_idx: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, s_idx)]
    seen: set[int] = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur in seen:
            continue
        seen.add(cur)
        if cur == g_idx:
            break
        for nxt, w in adj[cur]:
            nd = d + w
            if nd < dist.get(nxt, np.inf):
                dist[nxt] = nd
                prev[nxt] = cur
                heapq.heappush(heap, (nd, nxt))
    if g_idx not in seen:
        return None

    chain = [g_idx]
    while chain[-1] != s_idx:
        chain.append(prev[chain[-1]])
    chain.reverse()
    coords = np.array(
        [start if i == s_idx else goal if i == g_idx else rm.nodes[i] for i in chain]
    )
    return Path(coords, float(dist[g_idx]))


def replan_after_update(
    m: ElevationMap, start, goal, params: PrmParams
) -> tuple[Roadmap, Path | None]:
    """Full roadmap rebuild on the updated map followed by a query."""
    rm = build_prm(m, params)
    return rm, plan(rm, m, start, goal)


def render_overlay(
    m: ElevationMap,
    rm: Roadmap | None,
    path: Path | None,
    out_path,
    scale: int = 4,
):
    """Raster of traversability with roadmap nodes and the planned path."""
    from PIL import Image, ImageDraw

    h, w = m.shape
    t = m.traversability
    gray = np.zeros((h, w), dtype=np.uint8)
    defined = np.isfinite(t)
    gray[defined] = (55 + 200 * t[defined]).astype(np.uint8)
    img = Image.fromarray(gray, mode="L").convert("RGB")
    img = img.resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)

    def to_px(xy):
        c = (np.asarray(xy) - m.origin) / m.resolution * scale
        return float(c[0]), float(c[1])

    if rm is not None and len(rm.nodes):
        for i, j, _ in rm.edges:
            draw.line([to_px(rm.nodes[i]), to_px(rm.nodes[j])], fill=(70, 70, 160))
        for node in rm.nodes:
            x, y = to_px(node)
            draw.ellipse([x - 1, y - 1, x + 1, y + 1], fill=(90, 90, 220))
    if path is not None and len(path.waypoints) > 1:
        pts = [to_px(p) for p in path.waypoints]
        draw.line(pts, fill=(220, 40, 40), width=max(2, scale // 2))
        draw.ellipse(_dot(pts[0], scale), fill=(40, 200, 40))
        draw.ellipse(_dot(pts[-1], scale), fill=(230, 160, 30))
    img.transpose(Image.FLIP_TOP_BOTTOM).save(out_path)


def _dot(p, scale):
    r = max(2, scale)
    return [p[0] - r, p[1] - r, p[0] + r, p[1] + r]
