"""Elevation maps with traversability scores, plus the pre-processing steps
that produce them: place-label clustering and dangling-point removal.

Cells hold the mean z of their points; traversability is one minus the
clamped ratio of the largest height difference within the stride-length
neighborhood to the maximum step height. Unknown cells are NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import PointCloud, transform_points
from .session import SessionMap, fetch_resource

UNLABELED = "(unlabeled)"

VertexKey = tuple[str, int]


@dataclass(frozen=True)
class TraversabilityParams:
    stride: float = 0.4  # neighborhood radius, meters
    step_height: float = 0.15  # max climbable step, meters

    def __post_init__(self):
        if self.stride <= 0 or self.step_height <= 0:
            raise ValueError("stride and step height must be positive")


@dataclass(frozen=True)
class ElevationMap:
    origin: np.ndarray  # (2,) x, y of the grid corner, meters
    resolution: float
    heights: np.ndarray  # (H, W), NaN = no data; indexed [iy, ix]
    traversability: np.ndarray  # (H, W) in [0, 1], NaN where undefined
    counts: np.ndarray  # (H, W) points per cell
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(2))
        t = self.traversability
        defined = np.isfinite(t)
        if defined.any() and (np.nanmin(t) < -1e-12 or np.nanmax(t) > 1.0 + 1e-12):
            raise ValueError("traversability out of [0, 1]")
        if np.any(defined & ~np.isfinite(self.heights)):
            raise ValueError("traversability defined on a no-data height cell")

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        """Grid indices (ix, iy) of world points; may fall outside the grid."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        return np.floor((xy - self.origin) / self.resolution).astype(np.int64)

    def center_of(self, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        return np.stack(
            [
                self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution,
            ],
            axis=-1,
        )

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.shape
        return self.origin.copy(), self.origin + np.array([w, h]) * self.resolution


@dataclass(frozen=True)
class PlaceCluster:
    label: str
    members: tuple[VertexKey, ...]
    aabb_min: np.ndarray
    aabb_max: np.ndarray


def cluster_vertices_by_place(
    sessions: list[SessionMap],
    inter_pairs: list[tuple[VertexKey, VertexKey]] = (),
) -> list[PlaceCluster]:
    """Connected components of the merged graph restricted to equal labels.

    Adjacency combines each session's edges with the inter-session matched
    pairs; the bounding volume of a cluster is the union of its submap AABBs
    (vertex positions stand in where no submap exists).
    """
    label_of: dict[VertexKey, str] = {}
    adj: dict[VertexKey, list[VertexKey]] = {}
    for s in sessions:
        for vid, v in s.graph.vertices.items():
            key = (s.session_id, vid)
            label_of[key] = v.place_label or UNLABELED
            adj.setdefault(key, [])
        for e in s.graph.edges:
            a, b = (s.session_id, e.from_id), (s.session_id, e.to_id)
            adj[a].append(b)
            adj[b].append(a)
    for a, b in inter_pairs:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)

    by_id = {s.session_id: s for s in sessions}
    clusters: list[PlaceCluster] = []
    seen: set[VertexKey] = set()
    for start in sorted(adj):
        if start in seen:
            continue
        label = label_of[start]
        members = []
        stack = [start]
        seen.add(start)
        while stack:
            cur = stack.pop()
            members.append(cur)
            for nxt in adj[cur]:
                if nxt not in seen and label_of[nxt] == label:
                    seen.add(nxt)
                    stack.append(nxt)
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for sid, vid in members:
            s = by_id[sid]
            v = s.graph.vertices[vid]
            if s.has_resource(vid, "submap"):
                cloud = transform_points(v.pose, fetch_resource(s, vid, "submap"))
                if len(cloud):
                    cmin, cmax = cloud.aabb()
                    lo = np.minimum(lo, cmin)
                    hi = np.maximum(hi, cmax)
                    continue
            lo = np.minimum(lo, v.pose.translation)
            hi = np.maximum(hi, v.pose.translation)
        clusters.append(PlaceCluster(label, tuple(sorted(members)), lo, hi))
    return clusters


def crop_cloud(c: PointCloud, lo: np.ndarray, hi: np.ndarray, pad: float = 0.0) -> PointCloud:
    lo = np.asarray(lo, dtype=np.float64) - pad
    hi = np.asarray(hi, dtype=np.float64) + pad
    inside = np.all((c.points >= lo) & (c.points <= hi), axis=1)
    return PointCloud(c.points[inside], c.frame)


def remove_dangling_points(
    c: PointCloud,
    resolutions: tuple[float, ...] = (0.8, 0.4, 0.2),
    gap: float = 0.3,
) -> PointCloud:
    """Coarse-to-fine overhang filter.

    At each grid resolution, points in an x-y cell are 1D-clustered by height
    with `gap` as the break threshold and only the lowest cluster survives.
    """
    if len(resolutions) == 0:
        raise ValueError("need at least one filter resolution")
    if any(b >= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError("filter resolutions must be strictly decreasing")
    pts = c.points
    for res in resolutions:
        if pts.shape[0] == 0:
            break
        cell = np.floor(pts[:, :2] / res).astype(np.int64)
        # single sort by (cell, z); a run is one cell, lowest cluster first
        order = np.lexsort((pts[:, 2], cell[:, 1], cell[:, 0]))
        cell_sorted = cell[order]
        z_sorted = pts[order, 2]
        n = order.size
        new_cell = np.ones(n, dtype=bool)
        new_cell[1:] = np.any(cell_sorted[1:] != cell_sorted[:-1], axis=1)
        broke = np.zeros(n, dtype=bool)
        broke[1:] = (z_sorted[1:] - z_sorted[:-1] > gap) & ~new_cell[1:]
        run_start = np.maximum.accumulate(np.where(new_cell, np.arange(n), 0))
        breaks_before = np.cumsum(broke)
        keep_sorted = breaks_before == breaks_before[run_start]
        pts = pts[np.sort(order[keep_sorted])]
    return PointCloud(pts, c.frame)


def build_elevation_map(c: PointCloud, resolution: float, label: str = "") -> ElevationMap:
    """Mean z per cell; cells without points are no-data."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(c) == 0:
        empty = np.zeros((0, 0))
        return ElevationMap(np.zeros(2), resolution, empty, empty.copy(),
                            np.zeros((0, 0), dtype=np.int64), label)
    ix = np.floor(c.points[:, 0] / resolution).astype(np.int64)
    iy = np.floor(c.points[:, 1] / resolution).astype(np.int64)
    x0, y0 = ix.min(), iy.min()
    w = int(ix.max() - x0 + 1)
    h = int(iy.max() - y0 + 1)
    flat = (iy - y0) * w + (ix - x0)
    counts = np.bincount(flat, minlength=h * w).reshape(h, w)
    sums = np.bincount(flat, weights=c.points[:, 2], minlength=h * w).reshape(h, w)
    with np.errstate(invalid="ignore"):
        heights = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    origin = np.array([x0, y0], dtype=np.float64) * resolution
    return ElevationMap(
        origin, resolution, heights, np.full((h, w), np.nan), counts, label
    )


def _neighborhood_offsets(stride: float, resolution: float) -> list[tuple[int, int]]:
    r = int(np.floor(stride / resolution))
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            if np.hypot(dx, dy) * resolution <= stride:
                out.append((dy, dx))
    return out


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape
    out = np.full_like(a, np.nan)
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def compute_traversability(m: ElevationMap, p: TraversabilityParams) -> ElevationMap:
    """Score each defined cell by its worst height step within the stride
    radius; no-data neighbors are skipped rather than treated as cliffs."""
    h = m.heights
    if h.size == 0:
        return m
    defined = np.isfinite(h)
    h_max = np.where(defined, 0.0, np.nan)
    for dy, dx in _neighborhood_offsets(p.stride, m.resolution):
        diff = np.abs(_shifted(h, dy, dx) - h)
        h_max = np.fmax(h_max, diff)  # fmax ignores NaN neighbors
    with np.errstate(invalid="ignore"):
        t = 1.0 - np.minimum(h_max / p.step_height, 1.0)
    t = np.where(defined, t, np.nan)
    return replace(m, traversability=t)


def merge_elevation_maps(
    maps: list[ElevationMap], params: TraversabilityParams
) -> ElevationMap:
    """Union grid; overlapping cells take the value of the map with the most
    points in that cell, ties average. Traversability is recomputed."""
    maps = [m for m in maps if m.heights.size]
    if not maps:
        raise ValueError("nothing to merge")
    res = maps[0].resolution
    for m in maps[1:]:
        if abs(m.resolution - res) > 1e-12:
            raise ValueError("resolution mismatch between elevation maps")

    cells0 = np.array([np.round(m.origin / res).astype(np.int64) for m in maps])
    lo = cells0.min(axis=0)
    hi_list = []
    for m, c0 in zip(maps, cells0):
        h, w = m.shape
        hi_list.append(c0 + [w, h])
    hi = np.max(hi_list, axis=0)
    w, h = int(hi[0] - lo[0]), int(hi[1] - lo[1])

    stack_h = np.full((len(maps), h, w), np.nan)
    stack_c = np.zeros((len(maps), h, w), dtype=np.int64)
    for i, (m, c0) in enumerate(zip(maps, cells0)):
        mh, mw = m.shape
        oy, ox = int(c0[1] - lo[1]), int(c0[0] - lo[0])
        stack_h[i, oy : oy + mh, ox : ox + mw] = m.heights
        stack_c[i, oy : oy + mh, ox : ox + mw] = np.where(np.isfinite(m.heights), m.counts, 0)

    best = stack_c.max(axis=0)
    win = (stack_c == best) & (best > 0)
    with np.errstate(invalid="ignore"):
        sums = np.where(win, np.where(np.isfinite(stack_h), stack_h, 0.0), 0.0).sum(axis=0)
        n_win = win.sum(axis=0)
        heights = np.where(best > 0, sums / np.maximum(n_win, 1), np.nan)

    merged = ElevationMap(
        lo.astype(np.float64) * res,
        res,
        heights,
        np.full((h, w), np.nan),
        best,
        label="merged",
    )
    return compute_traversability(merged, params)


def _write_pgm(path: Path, data: np.ndarray):
    """16-bit big-endian P5 raster."""
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.astype(">u2").tobytes())


def export_elevation_map(m: ElevationMap, directory: Path | str, basename: str = "navmap"):
    """Grey-map raster pair plus metadata; gray 0 encodes no-data."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    defined = np.isfinite(m.heights)
    if defined.any():
        h_lo = float(np.nanmin(m.heights))
        h_hi = float(np.nanmax(m.heights))
    else:
        h_lo, h_hi = 0.0, 0.0
    span = max(h_hi - h_lo, 1e-9)
    h_img = np.zeros(m.shape, dtype=np.uint16)
    h_img[defined] = (1 + np.round((m.heights[defined] - h_lo) / span * 65534)).astype(np.uint16)
    t_img = np.zeros(m.shape, dtype=np.uint16)
    t_def = np.isfinite(m.traversability)
    t_img[t_def] = (1 + np.round(m.traversability[t_def] * 65534)).astype(np.uint16)
    _write_pgm(directory / f"{basename}_heights.pgm", h_img)
    _write_pgm(directory / f"{basename}_traversability.pgm", t_img)
    meta = {
        "origin": [float(m.origin[0]), float(m.origin[1])],
        "resolution": m.resolution,
        "label": m.label,
        "height_min": h_lo,
        "height_max": h_hi,
        "nodata_gray": 0,
        "rows_start_at_origin": True,
    }
    (directory / f"{basename}_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )


def save_elevation_map(m: ElevationMap, directory: Path | str):
    """Lossless grids as raw .npy plus a metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "heights.npy", m.heights)
    np.save(directory / "traversability.npy", m.traversability)
    np.save(directory / "counts.npy", m.counts)
    meta = {
        "origin": [float(m.origin[0]), float(m.origin[1])],
        "resolution": m.resolution,
        "label": m.label,
    }
    (directory / "grid_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_elevation_map(directory: Path | str) -> ElevationMap:
    directory = Path(directory)
    meta = json.loads((directory / "grid_meta.json").read_text())
    return ElevationMap(
        np.asarray(meta["origin"], dtype=np.float64),
        float(meta["resolution"]),
        np.load(directory / "heights.npy"),
        np.load(directory / "traversability.npy"),
        np.load(directory / "counts.npy"),
        meta.get("label", ""),
    )
