"""Loop-closure proposal from global descriptors and relative-pose estimation
from 3D-3D landmark correspondences.

Global descriptors are tf-idf weighted bag-of-words histograms over a learned
vocabulary; candidate matches are scored by cosine similarity. Relative poses
come from mutual-nearest-neighbor feature matching followed by RANSAC over
minimal 3-point rigid alignments and an all-inlier least-squares refit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import Pose
from .session import DescriptorSet, SessionMap, fetch_resource

VertexKey = tuple[str, int]  # (session_id, vertex_id)


@dataclass(frozen=True)
class LoopCandidate:
    query_vertex: VertexKey
    match_vertex: VertexKey
    similarity: float


@dataclass(frozen=True)
class RelativePoseEstimate:
    """Relative pose of the query vertex expressed in the match vertex frame."""

    pose: Pose  # match <- query
    inlier_count: int
    covariance: np.ndarray  # 6x6 SPD
    query_vertex: VertexKey = ("", -1)
    match_vertex: VertexKey = ("", -1)
    similarity: float = 0.0


@dataclass(frozen=True)
class Vocabulary:
    centroids: np.ndarray  # (W, D)
    idf: np.ndarray  # (W,), nonnegative

    def __post_init__(self):
        if np.any(self.idf < 0):
            raise ValueError("idf weights must be nonnegative")

    def __len__(self) -> int:
        return self.centroids.shape[0]

    def assign(self, features: np.ndarray) -> np.ndarray:
        """Nearest word index per feature row."""
        if features.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmin(cdist(features.astype(np.float64), self.centroids), axis=1)


@dataclass
class MatcherConfig:
    similarity_threshold: float = 0.3
    candidates_per_query: int = 5
    ransac_iterations: int = 500
    inlier_threshold: float = 0.05  # meters
    min_inliers: int = 10
    min_sigma: float = 1e-3  # covariance floor, meters
    seed: int = 0


def build_vocabulary(
    descriptor_sets: list[DescriptorSet], word_count: int, seed: int = 0
) -> Vocabulary:
    """Lloyd clustering with kmeans++ seeding; deterministic per seed."""
    feats = [ds.features.astype(np.float64) for ds in descriptor_sets if len(ds)]
    if not feats:
        raise ValueError("no descriptors to build a vocabulary from")
    data = np.concatenate(feats, axis=0)
    if data.shape[0] < word_count:
        raise ValueError(
            f"need at least {word_count} descriptors, got {data.shape[0]}"
        )
    rng = np.random.default_rng(seed)

    # kmeans++ seeding
    centroids = np.empty((word_count, data.shape[1]))
    centroids[0] = data[rng.integers(data.shape[0])]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for k in range(1, word_count):
        total = d2.sum()
        if total <= 0.0:
            centroids[k:] = data[rng.integers(data.shape[0], size=word_count - k)]
            break
        centroids[k] = data[np.searchsorted(np.cumsum(d2), rng.random() * total)]
        d2 = np.minimum(d2, np.sum((data - centroids[k]) ** 2, axis=1))

    assign = np.zeros(data.shape[0], dtype=np.int64)
    for _ in range(50):
        new_assign = np.argmin(cdist(data, centroids), axis=1)
        for k in range(word_count):
            members = data[new_assign == k]
            if members.shape[0]:
                centroids[k] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    # document-frequency idf over the training sets
    n_sets = len(feats)
    df = np.zeros(word_count)
    for f in feats:
        words = np.unique(np.argmin(cdist(f, centroids), axis=1))
        df[words] += 1.0
    idf = np.log((1.0 + n_sets) / (1.0 + df))
    return Vocabulary(centroids, idf)


def global_descriptor(ds: DescriptorSet, v: Vocabulary) -> dict[int, float]:
    """tf-idf weighted word histogram, L2-normalized; empty set -> zero vector."""
    if len(v) == 0:
        raise ValueError("empty vocabulary")
    if len(ds) == 0:
        return {}
    words = v.assign(ds.features)
    counts = np.bincount(words, minlength=len(v)).astype(np.float64)
    weights = (counts / counts.sum()) * v.idf
    norm = np.linalg.norm(weights)
    if norm <= 0.0:
        # all idf weights zero (word in every training set): fall back to tf
        weights = counts / counts.sum()
        norm = np.linalg.norm(weights)
    weights /= norm
    return {int(w): float(weights[w]) for w in np.nonzero(weights)[0]}


def cosine_similarity(a: dict[int, float], b: dict[int, float]) -> float:
    if not a or not b:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    return sum(w * b[k] for k, w in a.items() if k in b)


class DescriptorDatabase:
    """Global descriptors for every vertex of the indexed sessions."""

    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary
        self._globals: dict[VertexKey, dict[int, float]] = {}

    def add_session(self, s: SessionMap):
        for vid in s.graph.vertex_ids():
            if s.has_resource(vid, "descriptor_set"):
                ds = fetch_resource(s, vid, "descriptor_set")
                self._globals[(s.session_id, vid)] = global_descriptor(ds, self.vocabulary)

    def keys(self) -> list[VertexKey]:
        return sorted(self._globals)

    def query_candidates(
        self,
        query: VertexKey,
        query_descriptor: dict[int, float],
        k: int,
        similarity_threshold: float,
        exclude_session: str | None = None,
    ) -> list[LoopCandidate]:
        """Top-k database vertices by cosine similarity, at or above threshold."""
        scored = []
        for key in self.keys():
            if exclude_session is not None and key[0] == exclude_session:
                continue
            sim = cosine_similarity(query_descriptor, self._globals[key])
            if sim >= similarity_threshold:
                scored.append((-sim, key))
        scored.sort()
        return [
            LoopCandidate(query, key, -negsim) for negsim, key in scored[:k]
        ]


def mutual_matches(a: DescriptorSet, b: DescriptorSet) -> np.ndarray:
    """Indices (i, j) of mutual nearest neighbors in feature space."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = cdist(a.features.astype(np.float64), b.features.astype(np.float64))
    ab = np.argmin(d, axis=1)
    ba = np.argmin(d, axis=0)
    i = np.arange(len(a))
    keep = ba[ab[i]] == i
    return np.stack([i[keep], ab[i[keep]]], axis=1)


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rotation+translation mapping src points onto dst (SVD)."""
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (src - src_mean).T @ (dst - dst_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    r = vt.T @ flip @ u.T
    t = dst_mean - r @ src_mean
    return Pose.from_rt(r, t)


def estimate_relative_pose(
    query_ds: DescriptorSet,
    match_ds: DescriptorSet,
    cfg: MatcherConfig,
    candidate: LoopCandidate | None = None,
) -> RelativePoseEstimate | None:
    """RANSAC rigid alignment of query landmarks onto match landmarks.

    Returns None (rejection) when fewer than 3 correspondences exist or the
    refined model has fewer than `cfg.min_inliers` inliers.
    """
    pairs = mutual_matches(query_ds, match_ds)
    if pairs.shape[0] < 3:
        return None
    src = query_ds.landmarks[pairs[:, 0]]
    dst = match_ds.landmarks[pairs[:, 1]]
    n = pairs.shape[0]
    rng = np.random.default_rng(cfg.seed)

    best_mask = None
    best_count = 0
    for _ in range(cfg.ransac_iterations):
        sel = rng.choice(n, size=3, replace=False)
        try:
            model = fit_rigid(src[sel], dst[sel])
        except np.linalg.LinAlgError:
            continue
        resid = np.linalg.norm(model.apply(src) - dst, axis=1)
        mask = resid < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == n:
                break
    if best_mask is None or best_count < 3:
        return None

    refined = fit_rigid(src[best_mask], dst[best_mask])
    resid = np.linalg.norm(refined.apply(src) - dst, axis=1)
    mask = resid < cfg.inlier_threshold
    count = int(mask.sum())
    if count >= 3:
        refined = fit_rigid(src[mask], dst[mask])
        resid = np.linalg.norm(refined.apply(src) - dst, axis=1)
        mask = resid < cfg.inlier_threshold
        count = int(mask.sum())
    if count < cfg.min_inliers:
        return None

    rms = float(np.sqrt(np.mean(resid[mask] ** 2)))
    sigma = max(rms, cfg.min_sigma)
    covariance = (sigma**2 / count) * np.eye(6)

    query_key = candidate.query_vertex if candidate else ("", -1)
    match_key = candidate.match_vertex if candidate else ("", -1)
    similarity = candidate.similarity if candidate else 0.0
    pose = refined
    return RelativePoseEstimate(
        pose=pose,
        inlier_count=count,
        covariance=covariance,
        query_vertex=query_key,
        match_vertex=match_key,
        similarity=similarity,
    )


def select_best_match(estimates: list[RelativePoseEstimate]) -> RelativePoseEstimate | None:
    """Argmax by inlier count; ties broken by similarity, then lower match id."""
    if not estimates:
        return None
    return min(
        estimates,
        key=lambda e: (-e.inlier_count, -e.similarity, e.match_vertex),
    )


def propose_inter_session_edges(
    sessions: list[SessionMap],
    vocabulary: Vocabulary,
    cfg: MatcherConfig,
) -> list[RelativePoseEstimate]:
    """Best accepted inter-session match per query vertex.

    Each session after the first queries the database of all earlier sessions,
    mirroring incremental integration of new recordings.
    """
    edges: list[RelativePoseEstimate] = []
    db = DescriptorDatabase(vocabulary)
    db.add_session(sessions[0])
    desc_cache: dict[VertexKey, DescriptorSet] = {}

    def descriptors(key: VertexKey, s: SessionMap) -> DescriptorSet:
        if key not in desc_cache:
            desc_cache[key] = fetch_resource(s, key[1], "descriptor_set")
        return desc_cache[key]

    by_id = {s.session_id: s for s in sessions}
    for s in sessions[1:]:
        for vid in s.graph.vertex_ids():
            if not s.has_resource(vid, "descriptor_set"):
                continue
            qkey = (s.session_id, vid)
            qds = descriptors(qkey, s)
            gdesc = global_descriptor(qds, vocabulary)
            candidates = db.query_candidates(
                qkey,
                gdesc,
                cfg.candidates_per_query,
                cfg.similarity_threshold,
                exclude_session=s.session_id,
            )
            estimates = []
            for cand in candidates:
                mds = descriptors(cand.match_vertex, by_id[cand.match_vertex[0]])
                est = estimate_relative_pose(qds, mds, cfg, cand)
                if est is not None:
                    estimates.append(est)
            best = select_best_match(estimates)
            if best is not None:
                # frame-tag the pose now that both vertices are known
                pose = best.pose.with_frames(
                    by_id[best.match_vertex[0]].vertex_frame(best.match_vertex[1]),
                    s.vertex_frame(vid),
                )
                edges.append(
                    RelativePoseEstimate(
                        pose,
                        best.inlier_count,
                        best.covariance,
                        best.query_vertex,
                        best.match_vertex,
                        best.similarity,
                    )
                )
        db.add_session(s)
    return edges
