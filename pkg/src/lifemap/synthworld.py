"""Synthetic multi-epoch box worlds with ground truth.

Worlds are collections of axis-aligned solid boxes: per-room floor slabs,
static walls, and movable props placed per epoch. A simulated depth sensor
ray-casts regular azimuth/elevation grids against the epoch geometry; unique
landmark markers on every box surface give exact-testable descriptor sets.
Sessions dead-reckon from noisy odometry, so zero-noise sessions reproduce
ground truth exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .geometry import PointCloud, Pose
from .posegraph import Edge, EdgeKind, PoseGraph, Vertex
from .session import DescriptorSet, SessionMap, map_frame_name, vertex_frame

WORLD_FRAME = "world"
FEATURE_DIM = 24


def _stable_stream(*parts) -> np.random.Generator:
    seeds = []
    for p in parts:
        if isinstance(p, str):
            seeds.append(zlib.crc32(p.encode("utf-8")))
        else:
            seeds.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(seeds)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if np.any(self.hi <= self.lo):
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.lo) and np.all(p < self.hi))

    def shifted(self, offset: np.ndarray) -> "Box":
        return Box(self.lo + offset, self.hi + offset)

    def surface_points(self, spacing: float) -> np.ndarray:
        """Deterministic grid sampling of all six faces."""
        pts = []
        size = self.hi - self.lo
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            us = np.arange(spacing / 2, size[u], spacing)
            vs = np.arange(spacing / 2, size[v], spacing)
            if us.size == 0 or vs.size == 0:
                continue
            gu, gv = np.meshgrid(us, vs)
            for w in (0.0, size[axis]):
                face = np.empty((gu.size, 3))
                face[:, axis] = w
                face[:, u] = gu.ravel()
                face[:, v] = gv.ravel()
                pts.append(face)
        return (np.concatenate(pts, axis=0) + self.lo) if pts else np.zeros((0, 3))

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Random surface points, faces weighted by area."""
        size = self.hi - self.lo
        areas = []
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            areas += [size[u] * size[v]] * 2
        areas = np.asarray(areas)
        faces = rng.choice(6, size=count, p=areas / areas.sum())
        uv = rng.random((count, 2))
        out = np.empty((count, 3))
        for k in range(count):
            axis = faces[k] // 2
            side = faces[k] % 2
            u, v = [a for a in range(3) if a != axis]
            out[k, axis] = side * size[axis]
            out[k, u] = uv[k, 0] * size[u]
            out[k, v] = uv[k, 1] * size[v]
        return out + self.lo


@dataclass(frozen=True)
class Room:
    label: str
    region: Box  # interior volume; floor slab sits under region.lo[2]


@dataclass(frozen=True)
class PropSpec:
    name: str
    size: np.ndarray
    placements: dict[int, np.ndarray]  # epoch -> min corner; absent = not present

    def __post_init__(self):
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(
            self,
            "placements",
            {int(e): np.asarray(p, dtype=np.float64).reshape(3) for e, p in self.placements.items()},
        )


@dataclass(frozen=True)
class WorldSpec:
    name: str
    seed: int
    epochs: int
    rooms: tuple[Room, ...]
    static_boxes: tuple[Box, ...] = ()
    props: tuple[PropSpec, ...] = ()
    landmarks_per_box: int = 12
    floor_thickness: float = 0.1

    def solid_boxes(self, epoch: int) -> list[tuple[str, Box]]:
        """World geometry present in one epoch, with stable box identifiers."""
        if not (0 <= epoch < self.epochs):
            raise ValueError(f"epoch {epoch} outside 0..{self.epochs - 1}")
        out: list[tuple[str, Box]] = []
        for i, room in enumerate(self.rooms):
            lo = room.region.lo.copy()
            hi = room.region.hi.copy()
            floor = Box(
                np.array([lo[0], lo[1], lo[2] - self.floor_thickness]),
                np.array([hi[0], hi[1], lo[2]]),
            )
            out.append((f"floor/{i}/{room.label}", floor))
        for i, b in enumerate(self.static_boxes):
            out.append((f"static/{i}", b))
        for prop in self.props:
            if epoch in prop.placements:
                base = Box(np.zeros(3), prop.size).shifted(prop.placements[epoch])
                out.append((f"prop/{prop.name}", base))
        return out

    def place_label_of(self, p: np.ndarray) -> str:
        for room in self.rooms:
            if room.region.contains(np.asarray(p)):
                return room.label
        return ""

    def landmarks(self, epoch: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Positions (L, 3), signatures (L, D), and stable landmark names.

        Landmarks live on box surfaces; a prop's landmarks move rigidly with
        it and keep their signatures across epochs.
        """
        positions = []
        signatures = []
        names = []
        for box_id, box in self.solid_boxes(epoch):
            rng = _stable_stream(self.seed, "landmarks", box_id)
            if box_id.startswith("prop/"):
                prop = next(p for p in self.props if f"prop/{p.name}" == box_id)
                local = Box(np.zeros(3), prop.size).sample_surface(self.landmarks_per_box, rng)
                pts = local + prop.placements[epoch]
            else:
                pts = box.sample_surface(self.landmarks_per_box, rng)
            sig_rng = _stable_stream(self.seed, "signatures", box_id)
            sig = sig_rng.normal(size=(self.landmarks_per_box, FEATURE_DIM))
            positions.append(pts)
            signatures.append(sig)
            names += [f"{box_id}#{k}" for k in range(self.landmarks_per_box)]
        return np.concatenate(positions), np.concatenate(signatures), names


@dataclass(frozen=True)
class SensorModel:
    hfov: float = np.deg2rad(120.0)
    vfov: float = np.deg2rad(100.0)
    angular_resolution: float = np.deg2rad(2.0)
    max_range: float = 5.0
    depth_sigma: float = 0.0
    landmark_sigma: float = 0.0
    feature_sigma: float = 0.0

    def __post_init__(self):
        for name in ("hfov", "vfov"):
            val = getattr(self, name)
            if not (0.0 < val < 2.0 * np.pi):
                raise ValueError(f"{name} must lie in (0, 2*pi)")
        if self.angular_resolution <= 0 or self.max_range <= 0:
            raise ValueError("angular resolution and max range must be positive")

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame (x forward, z up)."""
        az = np.arange(-self.hfov / 2, self.hfov / 2 + 1e-12, self.angular_resolution)
        el = np.arange(-self.vfov / 2, self.vfov / 2 + 1e-12, self.angular_resolution)
        ga, ge = np.meshgrid(az, el)
        ga, ge = ga.ravel(), ge.ravel()
        return np.column_stack(
            [np.cos(ge) * np.cos(ga), np.cos(ge) * np.sin(ga), np.sin(ge)]
        )


@dataclass(frozen=True)
class OdometryNoise:
    sigma_t: float = 0.0  # meters per step
    sigma_r: float = 0.0  # radians per step


@dataclass(frozen=True)
class TrajectorySpec:
    session_id: str
    epoch: int
    waypoints: np.ndarray  # (M, 3) base positions
    sensor: SensorModel = field(default_factory=SensorModel)
    odometry: OdometryNoise = field(default_factory=OdometryNoise)
    keyframe_spacing: float = 0.5
    speed: float = 1.0
    sensor_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "sensor_offset", np.asarray(self.sensor_offset, dtype=np.float64).reshape(3))
        if self.keyframe_spacing <= 0:
            raise ValueError("keyframe spacing must be positive")
        if self.waypoints.shape[0] < 2:
            raise ValueError("need at least two waypoints")


def _keyframe_poses(traj: TrajectorySpec) -> list[Pose]:
    """Ground-truth base poses at arclength multiples of the spacing."""
    wps = traj.waypoints
    seg = np.diff(wps, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= 1e-12):
        raise ValueError("degenerate trajectory segment")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    stations = np.arange(0.0, total + 1e-9, traj.keyframe_spacing)
    poses = []
    for i, s in enumerate(stations):
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = (s - cum[k]) / seg_len[k]
        pos = wps[k] + frac * seg[k]
        yaw = np.arctan2(seg[k][1], seg[k][0])
        q = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
        poses.append(Pose(q, pos, WORLD_FRAME, f"kf{i}"))
    return poses


def ray_box_entry(origins: np.ndarray, dirs: np.ndarray, boxes: list[Box]) -> np.ndarray:
    """Distance to the nearest box surface per ray (inf when nothing is hit).

    `dirs` must be unit length; origins inside a box are treated as seeing
    that box at its exit face (degenerate and avoided by construction).
    """
    n = origins.shape[0]
    best = np.full(n, np.inf)
    for box in boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lo[None, :] - origins) / dirs
            t2 = (box.hi[None, :] - origins) / dirs
        tnear = np.nanmax(np.minimum(t1, t2), axis=1)
        tfar = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tfar >= tnear) & (tfar > 1e-9)
        entry = np.where(tnear > 1e-9, tnear, tfar)
        best = np.where(hit & (entry < best), entry, best)
    return best


@dataclass
class SessionGroundTruth:
    poses: list[Pose]  # world-frame base poses, ordered by vertex id
    surface_cloud: PointCloud  # exact observed surface points, world frame


def generate_session(
    world: WorldSpec, traj: TrajectorySpec
) -> tuple[SessionMap, SessionGroundTruth]:
    """Simulate one recording: submaps, descriptors, noisy odometry graph."""
    boxes = [b for _, b in world.solid_boxes(traj.epoch)]
    lm_pos, lm_sig, _ = world.landmarks(traj.epoch)
    gt_poses = _keyframe_poses(traj)
    sensor = traj.sensor
    dirs_local = sensor.ray_directions()

    rng_odom = _stable_stream(world.seed, traj.seed, "odometry")
    rng_depth = _stable_stream(world.seed, traj.seed, "depth")
    rng_feat = _stable_stream(world.seed, traj.seed, "features")

    sid = traj.session_id
    mframe = map_frame_name(sid)
    graph = PoseGraph()
    session = SessionMap(
        session_id=sid,
        map_frame=mframe,
        graph=graph,
        sensor_offset=traj.sensor_offset,
    )

    surface_pts = []
    est_pose = None
    prev_gt = None
    prev_est = None
    sig_t = max(traj.odometry.sigma_t, 1e-6)
    sig_r = max(traj.odometry.sigma_r, 1e-6)
    cov = np.diag([sig_r**2] * 3 + [sig_t**2] * 3)

    for vid, gt in enumerate(gt_poses):
        vframe = vertex_frame(sid, vid)
        gt = gt.with_frames(WORLD_FRAME, vframe)
        gt_poses[vid] = gt
        if vid == 0:
            est_pose = gt.with_frames(mframe, vframe)
        else:
            rel_gt = prev_gt.inverse().compose(gt)
            noise = np.concatenate(
                [rng_odom.normal(0.0, traj.odometry.sigma_r, 3),
                 rng_odom.normal(0.0, traj.odometry.sigma_t, 3)]
            )
            rel_meas = rel_gt.retract(noise)
            graph.add_edge(Edge(vid - 1, vid, rel_meas, cov, EdgeKind.ODOMETRY))
            est_pose = prev_est.compose(rel_meas)

        label = world.place_label_of(gt.translation)
        graph.add_vertex(Vertex(vid, est_pose, label))

        # depth rendering from the (exact) sensor pose
        origin = gt.apply(traj.sensor_offset.reshape(1, 3))[0]
        dirs = dirs_local @ gt.rotation_matrix().T
        depth = ray_box_entry(np.broadcast_to(origin, dirs.shape), dirs, boxes)
        hit = depth <= sensor.max_range
        if hit.any():
            d = depth[hit]
            exact = origin + d[:, None] * dirs[hit]
            surface_pts.append(exact)
            if sensor.depth_sigma > 0:
                d = d + rng_depth.normal(0.0, sensor.depth_sigma, d.size)
            pts_world = origin + d[:, None] * dirs[hit]
            local = gt.inverse().apply(pts_world)
            session.attach_resource(vid, "submap", PointCloud(local, vframe))
        else:
            session.attach_resource(vid, "submap", PointCloud(np.zeros((0, 3)), vframe))

        # landmark observations: range + field of view + occlusion
        to_lm = lm_pos - origin
        dist = np.linalg.norm(to_lm, axis=1)
        in_range = (dist > 1e-9) & (dist <= sensor.max_range)
        cand = np.nonzero(in_range)[0]
        if cand.size:
            local_dir = (to_lm[cand] / dist[cand, None]) @ gt.rotation_matrix()
            az = np.arctan2(local_dir[:, 1], local_dir[:, 0])
            el = np.arcsin(np.clip(local_dir[:, 2], -1.0, 1.0))
            in_fov = (np.abs(az) <= sensor.hfov / 2) & (np.abs(el) <= sensor.vfov / 2)
            cand = cand[in_fov]
        if cand.size:
            ray_dirs = to_lm[cand] / dist[cand, None]
            first_hit = ray_box_entry(np.broadcast_to(origin, ray_dirs.shape), ray_dirs, boxes)
            visible = cand[first_hit >= dist[cand] - 1e-6]
        else:
            visible = cand
        if visible.size:
            feats = lm_sig[visible] + (
                rng_feat.normal(0.0, sensor.feature_sigma, (visible.size, FEATURE_DIM))
                if sensor.feature_sigma > 0 else 0.0
            )
            pts_local = gt.inverse().apply(lm_pos[visible])
            if sensor.landmark_sigma > 0:
                pts_local = pts_local + rng_feat.normal(0.0, sensor.landmark_sigma, pts_local.shape)
            session.attach_resource(vid, "descriptor_set", DescriptorSet(feats, pts_local))
        else:
            session.attach_resource(
                vid, "descriptor_set", DescriptorSet(np.zeros((0, FEATURE_DIM)), np.zeros((0, 3)))
            )

        prev_gt = gt
        prev_est = est_pose

    graph.validate()
    cloud = PointCloud(
        np.concatenate(surface_pts) if surface_pts else np.zeros((0, 3)), WORLD_FRAME
    )
    return session, SessionGroundTruth(gt_poses, cloud)


def sample_world_surface(world: WorldSpec, epoch: int, density: float = 0.01) -> PointCloud:
    """Grid sampling of every solid surface in one epoch."""
    pts = [box.surface_points(density) for _, box in world.solid_boxes(epoch)]
    return PointCloud(np.concatenate(pts), WORLD_FRAME)


def change_ground_truth(
    world: WorldSpec, epoch_a: int, epoch_b: int, density: float = 0.01
) -> tuple[PointCloud, PointCloud]:
    """Exact annotation: surfaces of props present or placed differently in
    exactly one epoch are changed; everything else is static."""
    changed = []
    static = []
    boxes_a = dict(world.solid_boxes(epoch_a))
    boxes_b = dict(world.solid_boxes(epoch_b))
    for box_id in sorted(set(boxes_a) | set(boxes_b)):
        in_a, in_b = box_id in boxes_a, box_id in boxes_b
        if in_a and in_b:
            same = np.allclose(boxes_a[box_id].lo, boxes_b[box_id].lo) and np.allclose(
                boxes_a[box_id].hi, boxes_b[box_id].hi
            )
            if same:
                static.append(boxes_a[box_id].surface_points(density))
            else:
                changed.append(boxes_a[box_id].surface_points(density))
                changed.append(boxes_b[box_id].surface_points(density))
        else:
            changed.append((boxes_a if in_a else boxes_b)[box_id].surface_points(density))
    changed_pts = np.concatenate(changed) if changed else np.zeros((0, 3))
    static_pts = np.concatenate(static) if static else np.zeros((0, 3))
    return PointCloud(changed_pts, WORLD_FRAME), PointCloud(static_pts, WORLD_FRAME)


def filter_visible(
    world: WorldSpec,
    epoch: int,
    points: PointCloud,
    trajectories: list[TrajectorySpec],
) -> PointCloud:
    """Points seen (range, field of view, occlusion) from at least one
    keyframe of the given trajectories."""
    boxes = [b for _, b in world.solid_boxes(epoch)]
    pts = points.points
    unseen = np.ones(len(pts), dtype=bool)
    for traj in trajectories:
        sensor = traj.sensor
        for gt in _keyframe_poses(traj):
            if not unseen.any():
                break
            idx = np.nonzero(unseen)[0]
            origin = gt.apply(traj.sensor_offset.reshape(1, 3))[0]
            to_p = pts[idx] - origin
            dist = np.linalg.norm(to_p, axis=1)
            ok = (dist > 1e-9) & (dist <= sensor.max_range)
            idx, to_p, dist = idx[ok], to_p[ok], dist[ok]
            if idx.size == 0:
                continue
            local_dir = (to_p / dist[:, None]) @ gt.rotation_matrix()
            az = np.arctan2(local_dir[:, 1], local_dir[:, 0])
            el = np.arcsin(np.clip(local_dir[:, 2], -1.0, 1.0))
            ok = (np.abs(az) <= sensor.hfov / 2) & (np.abs(el) <= sensor.vfov / 2)
            idx, to_p, dist = idx[ok], to_p[ok], dist[ok]
            if idx.size == 0:
                continue
            hit = ray_box_entry(np.broadcast_to(origin, to_p.shape), to_p / dist[:, None], boxes)
            visible = hit >= dist - 1e-6
            unseen[idx[visible]] = False
    return PointCloud(pts[~unseen], points.frame)


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse: float
    rpe_rmse: float
    pose_count: int
    rpe_pairs: int


def evaluate_trajectory(
    est: list[Pose],
    gt: list[Pose],
    keys: list | None = None,
    segments: list | None = None,
    rpe_distance: float = 1.0,
) -> TrajectoryMetrics:
    """ATE/RPE RMSE of an estimated trajectory against ground truth.

    The estimate is rigidly aligned so its first (gauge) pose coincides with
    ground truth; the gauge is excluded from the error statistics. RPE pairs
    the first pose at least `rpe_distance` farther along the ground-truth
    path, within the same segment (one segment per session).
    """
    if len(est) != len(gt) or len(est) == 0:
        raise ValueError("trajectories must be nonempty and equally long")
    if keys is not None:
        arr = list(keys)
        if any(not (a < b) for a, b in zip(arr, arr[1:])):
            raise ValueError("timestamps must be strictly increasing")
    seg = np.zeros(len(est), dtype=np.int64) if segments is None else np.asarray(segments)

    r_est = np.stack([p.rotation_matrix() for p in est])
    t_est = np.stack([p.translation for p in est])
    r_gt = np.stack([p.rotation_matrix() for p in gt])
    t_gt = np.stack([p.translation for p in gt])

    r_align = r_gt[0] @ r_est[0].T
    t_align = t_gt[0] - r_align @ t_est[0]
    r_al = np.einsum("ij,njk->nik", r_align, r_est)
    t_al = t_est @ r_align.T + t_align

    errs = np.linalg.norm(t_al[1:] - t_gt[1:], axis=1)
    ate = float(np.sqrt(np.mean(errs**2))) if errs.size else 0.0

    # pair indices ~rpe_distance apart along the ground-truth path
    pair_errs = []
    for s in np.unique(seg):
        idx = np.nonzero(seg == s)[0]
        if idx.size < 2:
            continue
        steps = np.linalg.norm(np.diff(t_gt[idx], axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(steps)])
        for a in range(idx.size - 1):
            b = int(np.searchsorted(arc, arc[a] + rpe_distance))
            if b >= idx.size:
                break
            i, j = idx[a], idx[b]
            rel_gt_t = r_gt[i].T @ (t_gt[j] - t_gt[i])
            rel_es_t = r_al[i].T @ (t_al[j] - t_al[i])
            pair_errs.append(np.linalg.norm(rel_es_t - rel_gt_t))
    rpe = float(np.sqrt(np.mean(np.square(pair_errs)))) if pair_errs else 0.0
    return TrajectoryMetrics(ate, rpe, len(est), len(pair_errs))


@dataclass(frozen=True)
class MapErrorStats:
    mean: float
    median: float
    max: float
    p90: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "max": self.max, "p90": self.p90}


def point_to_point_error(map_cloud: PointCloud, gt_cloud: PointCloud) -> MapErrorStats:
    """Nearest-neighbor distance statistics from the estimated map to the
    ground-truth cloud."""
    if len(map_cloud) == 0 or len(gt_cloud) == 0:
        raise ValueError("clouds must be nonempty")
    d, _ = cKDTree(gt_cloud.points).query(map_cloud.points)
    return MapErrorStats(
        mean=float(d.mean()),
        median=float(np.median(d)),
        max=float(d.max()),
        p90=float(np.percentile(d, 90)),
    )


# ---------------------------------------------------------------------------
# structured-text spec files


def load_world(path: Path | str) -> WorldSpec:
    raw = yaml.safe_load(Path(path).read_text())
    rooms = tuple(
        Room(r["label"], Box(np.asarray(r["min"]), np.asarray(r["max"])))
        for r in raw.get("rooms", [])
    )
    statics = tuple(
        Box(np.asarray(b["min"]), np.asarray(b["max"])) for b in raw.get("static_boxes", [])
    )
    props = tuple(
        PropSpec(
            p["name"],
            np.asarray(p["size"]),
            {int(e): np.asarray(pos) for e, pos in (p.get("placements") or {}).items() if pos is not None},
        )
        for p in raw.get("props", [])
    )
    return WorldSpec(
        name=raw.get("name", Path(path).stem),
        seed=int(raw.get("seed", 0)),
        epochs=int(raw.get("epochs", 1)),
        rooms=rooms,
        static_boxes=statics,
        props=props,
        landmarks_per_box=int(raw.get("landmarks_per_box", 12)),
        floor_thickness=float(raw.get("floor_thickness", 0.1)),
    )


def load_trajectories(path: Path | str) -> list[TrajectorySpec]:
    raw = yaml.safe_load(Path(path).read_text())

    def sensor_from(d: dict) -> SensorModel:
        return SensorModel(
            hfov=np.deg2rad(float(d.get("hfov_deg", 120.0))),
            vfov=np.deg2rad(float(d.get("vfov_deg", 100.0))),
            angular_resolution=np.deg2rad(float(d.get("angular_res_deg", 2.0))),
            max_range=float(d.get("max_range", 5.0)),
            depth_sigma=float(d.get("depth_sigma", 0.0)),
            landmark_sigma=float(d.get("landmark_sigma", 0.0)),
            feature_sigma=float(d.get("feature_sigma", 0.0)),
        )

    def odometry_from(d: dict) -> OdometryNoise:
        return OdometryNoise(
            sigma_t=float(d.get("sigma_t", 0.0)),
            sigma_r=np.deg2rad(float(d.get("sigma_r_deg", 0.0))),
        )

    base_sensor = raw.get("sensor", {})
    base_odom = raw.get("odometry", {})
    out = []
    for s in raw.get("sessions", []):
        out.append(
            TrajectorySpec(
                session_id=str(s["id"]),
                epoch=int(s.get("epoch", 0)),
                waypoints=np.asarray(s["waypoints"], dtype=np.float64),
                sensor=sensor_from({**base_sensor, **s.get("sensor", {})}),
                odometry=odometry_from({**base_odom, **s.get("odometry", {})}),
                keyframe_spacing=float(s.get("keyframe_spacing", raw.get("keyframe_spacing", 0.5))),
                speed=float(s.get("speed", raw.get("speed", 1.0))),
                sensor_offset=np.asarray(
                    s.get("sensor_offset", raw.get("sensor_offset", [0.0, 0.0, 1.0])),
                    dtype=np.float64,
                ),
                seed=int(s.get("seed", 0)),
            )
        )
    return out
