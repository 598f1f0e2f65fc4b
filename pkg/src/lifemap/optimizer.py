"""Merged multi-session factor graph and Levenberg-Marquardt optimization on
the SE(3) manifold.

Residuals are vee-mapped logs of measurement-vs-state relative pose
discrepancies, whitened by the edge covariance. Inter-session factors are
robustified with a Cauchy kernel (IRLS weighting); intra-session factors stay
quadratic by default. The single gauge variable (first vertex of the first
session) is held fixed to remove the global rigid-motion ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import DisconnectedSessionError, OptimizerError
from .geometry import (
    Pose,
    Twist,
    se3_adjoint,
    se3_left_jacobian_inv,
    se3_log,
    se3_right_jacobian_inv,
)
from .place_recognition import RelativePoseEstimate
from .session import SessionMap

VarKey = tuple[str, int]


@dataclass(frozen=True)
class Factor:
    key_a: VarKey
    key_b: VarKey
    measured: Pose  # T_{a,b}: frame of a <- frame of b
    covariance: np.ndarray  # 6x6 SPD
    robust: bool = False


@dataclass
class FactorGraph:
    variables: dict[VarKey, Pose]
    factors: list[Factor]
    gauge: VarKey
    matched_set: list[tuple[VarKey, VarKey]] = field(default_factory=list)


@dataclass
class OptimizerConfig:
    cauchy_scale: float = 1.0  # Mahalanobis units
    max_iterations: int = 100
    gradient_tol: float = 1e-8
    rel_cost_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    max_retries: int = 10
    jacobian: str = "analytic"  # or "numeric"


@dataclass
class OptimizationReport:
    initial_cost: float = 0.0
    final_cost: float = 0.0
    iterations: int = 0
    termination_reason: str = ""
    cost_trace: list[float] = field(default_factory=list)
    edge_weights: list[tuple[VarKey, VarKey, float]] = field(default_factory=list)

    def format_text(self) -> str:
        lines = [
            "optimization report",
            f"  initial cost: {self.initial_cost:.9e}",
            f"  final cost:   {self.final_cost:.9e}",
            f"  iterations:   {self.iterations}",
            f"  termination:  {self.termination_reason}",
            "  cost trace:",
        ]
        lines += [f"    {i}: {c:.9e}" for i, c in enumerate(self.cost_trace)]
        lines.append("  final robust weights (inter-session edges):")
        for ka, kb, w in self.edge_weights:
            lines.append(f"    {ka[0]}:{ka[1]} -> {kb[0]}:{kb[1]}  weight {w:.6f}")
        return "\n".join(lines) + "\n"


def residual(factor: Factor, states: dict[VarKey, Pose]) -> Twist:
    """log( measured^-1 * (T_a^-1 * T_b) ), vee-mapped."""
    t_ab = states[factor.key_a].inverse().compose(states[factor.key_b])
    return se3_log(factor.measured.inverse().compose(t_ab))


def cauchy_rho(s: float, c: float) -> tuple[float, float]:
    """Cauchy loss value and its first derivative (the IRLS weight)."""
    if s < 0.0 or c <= 0.0:
        raise ValueError("need s >= 0 and c > 0")
    ratio = s / (c * c)
    return c * c * np.log1p(ratio), 1.0 / (1.0 + ratio)


def residual_jacobians(
    factor: Factor, states: dict[VarKey, Pose], mode: str = "analytic"
) -> tuple[Twist, np.ndarray, np.ndarray]:
    """Residual and its Jacobians wrt right-multiplicative perturbations of
    the two endpoint states."""
    r = residual(factor, states)
    if mode == "analytic":
        jr_inv = se3_right_jacobian_inv(r)
        jl_inv = se3_left_jacobian_inv(r)
        adj = se3_adjoint(factor.measured.inverse())
        return r, -jl_inv @ adj, jr_inv
    if mode != "numeric":
        raise ValueError(f"unknown jacobian mode {mode!r}")
    h = 1e-6
    j_a = np.zeros((6, 6))
    j_b = np.zeros((6, 6))
    local = {k: states[k] for k in (factor.key_a, factor.key_b)}
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = h
        for key, j in ((factor.key_a, j_a), (factor.key_b, j_b)):
            base = local[key]
            local[key] = base.retract(delta)
            rp = residual(factor, local)
            local[key] = base.retract(-delta)
            rm = residual(factor, local)
            local[key] = base
            j[:, k] = (rp - rm) / (2.0 * h)
    return r, j_a, j_b


def build_merged_graph(
    sessions: list[SessionMap],
    inter_edges: list[RelativePoseEstimate],
    robust_intra: bool = False,
) -> FactorGraph:
    """Connect session pose graphs with inter-session edges.

    The first session's map frame anchors the merge; every later session is
    rigidly pre-aligned using its best (most inliers) edge into the already
    placed component. Sessions without a path of inter-session edges to the
    first session refuse to merge.
    """
    if not sessions:
        raise ValueError("need at least one session")
    by_id = {s.session_id: s for s in sessions}
    if len(by_id) != len(sessions):
        raise ValueError("duplicate session ids")

    links: dict[str, list[RelativePoseEstimate]] = {s.session_id: [] for s in sessions}
    for est in inter_edges:
        qs, ms = est.query_vertex[0], est.match_vertex[0]
        if qs not in by_id or ms not in by_id:
            raise ValueError(f"inter edge references unknown session {qs!r} or {ms!r}")
        links[qs].append(est)
        links[ms].append(est)

    # session-level placement order (breadth-first from the anchor)
    anchor = sessions[0].session_id
    placed = [anchor]
    placed_set = {anchor}
    frontier = [anchor]
    while frontier:
        nxt = []
        for sid in frontier:
            for est in links[sid]:
                other = est.query_vertex[0] if est.match_vertex[0] == sid else est.match_vertex[0]
                if other not in placed_set:
                    placed_set.add(other)
                    placed.append(other)
                    nxt.append(other)
        frontier = nxt
    for s in sessions:
        if s.session_id not in placed_set:
            raise DisconnectedSessionError(s.session_id)

    common = sessions[0].map_frame
    states: dict[VarKey, Pose] = {}
    for vid in sessions[0].graph.vertex_ids():
        states[(anchor, vid)] = sessions[0].graph.vertices[vid].pose

    for sid in placed[1:]:
        s = by_id[sid]
        earlier = set(placed[: placed.index(sid)])
        options = [
            est
            for est in links[sid]
            if (est.query_vertex[0] == sid and est.match_vertex[0] in earlier)
            or (est.match_vertex[0] == sid and est.query_vertex[0] in earlier)
        ]
        best = max(options, key=lambda e: (e.inlier_count, e.similarity))
        if best.query_vertex[0] == sid:
            local = s.graph.vertices[best.query_vertex[1]].pose
            align = states[best.match_vertex].compose(best.pose).compose(local.inverse())
        else:
            local = s.graph.vertices[best.match_vertex[1]].pose
            align = states[best.query_vertex].compose(best.pose.inverse()).compose(local.inverse())
        align = align.with_frames(common, s.map_frame)
        for vid in s.graph.vertex_ids():
            states[(sid, vid)] = align.compose(s.graph.vertices[vid].pose)

    factors: list[Factor] = []
    for s in sessions:
        for e in s.graph.edges:
            factors.append(
                Factor(
                    (s.session_id, e.from_id),
                    (s.session_id, e.to_id),
                    e.relative,
                    e.covariance,
                    robust=robust_intra,
                )
            )
    matched = []
    for est in inter_edges:
        factors.append(
            Factor(est.match_vertex, est.query_vertex, est.pose, est.covariance, robust=True)
        )
        matched.append((est.match_vertex, est.query_vertex))

    gauge = (anchor, min(sessions[0].graph.vertices))
    return FactorGraph(states, factors, gauge, matched)


def total_cost(g: FactorGraph, states: dict[VarKey, Pose], cauchy_scale: float) -> float:
    """Sum of rho(||r||^2_Sigma) over robust factors plus plain squared
    Mahalanobis norms over quadratic ones."""
    cost = 0.0
    for f in g.factors:
        rw = _whiten(f)(residual(f, states))
        s = float(rw @ rw)
        cost += cauchy_rho(s, cauchy_scale)[0] if f.robust else s
    return cost


def _whiten(factor: Factor):
    L = np.linalg.cholesky(factor.covariance)

    def apply(x: np.ndarray) -> np.ndarray:
        # L^-1 x: whitens a residual (1-D) or the columns of a Jacobian (2-D)
        return solve_triangular(L, x, lower=True)

    return apply


def optimize(
    g: FactorGraph, cfg: OptimizerConfig | None = None
) -> tuple[dict[VarKey, Pose], OptimizationReport]:
    """Levenberg-Marquardt with right-multiplicative SE(3) increments."""
    cfg = cfg or OptimizerConfig()
    states = dict(g.variables)
    keys = sorted(k for k in states if k != g.gauge)
    index = {k: i for i, k in enumerate(keys)}
    dim = 6 * len(keys)

    whiteners = [_whiten(f) for f in g.factors]

    def evaluate(st) -> float:
        cost = 0.0
        for f, wh in zip(g.factors, whiteners):
            rw = wh(residual(f, st))
            s = float(rw @ rw)
            cost += cauchy_rho(s, cfg.cauchy_scale)[0] if f.robust else s
        return cost

    report = OptimizationReport()
    cost = evaluate(states)
    report.initial_cost = cost
    report.cost_trace.append(cost)

    lam = cfg.lambda_init
    reason = "max_iterations"
    iterations = 0
    while dim and iterations < cfg.max_iterations:
        h_mat = np.zeros((dim, dim))
        grad = np.zeros(dim)
        for f, wh in zip(g.factors, whiteners):
            r, j_a, j_b = residual_jacobians(f, states, cfg.jacobian)
            rw = wh(r)
            s = float(rw @ rw)
            w = cauchy_rho(s, cfg.cauchy_scale)[1] if f.robust else 1.0
            blocks = [
                (index[key], wh(j))
                for key, j in ((f.key_a, j_a), (f.key_b, j_b))
                if key != g.gauge
            ]
            for i, jw in blocks:
                grad[6 * i : 6 * i + 6] += w * (jw.T @ rw)
            for i, jw1 in blocks:
                for j, jw2 in blocks:
                    h_mat[6 * i : 6 * i + 6, 6 * j : 6 * j + 6] += w * (jw1.T @ jw2)

        if np.max(np.abs(grad)) < cfg.gradient_tol:
            reason = "gradient"
            break

        iterations += 1
        accepted = False
        damping = np.diag(np.maximum(np.diag(h_mat), 1e-12))
        for _ in range(cfg.max_retries):
            try:
                chol = cho_factor(h_mat + lam * damping, lower=True)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_factor
                continue
            delta = cho_solve(chol, -grad)
            trial = dict(states)
            for k, i in index.items():
                trial[k] = states[k].retract(delta[6 * i : 6 * i + 6])
            trial_cost = evaluate(trial)
            if trial_cost <= cost:
                improvement = cost - trial_cost
                states = trial
                cost = trial_cost
                report.cost_trace.append(cost)
                lam = max(lam / cfg.lambda_factor, 1e-12)
                accepted = True
                if improvement < cfg.rel_cost_tol * max(cost, 1e-300):
                    reason = "cost_change"
                break
            lam *= cfg.lambda_factor
        if not accepted:
            report.final_cost = cost
            report.iterations = iterations
            report.termination_reason = "aborted"
            raise OptimizerError(
                f"no acceptable step after {cfg.max_retries} damping retries "
                f"(lambda reached {lam:.3e})",
                report,
            )
        if reason == "cost_change":
            break

    report.final_cost = cost
    report.iterations = iterations
    report.termination_reason = reason
    for f, wh in zip(g.factors, whiteners):
        if f.robust:
            rw = wh(residual(f, states))
            w = cauchy_rho(float(rw @ rw), cfg.cauchy_scale)[1]
            report.edge_weights.append((f.key_a, f.key_b, w))
    return states, report


def apply_optimized_poses(
    sessions: list[SessionMap], states: dict[VarKey, Pose], common_frame: str
) -> list[SessionMap]:
    """Rewrite every vertex pose into the common frame; submaps untouched."""
    out = []
    for s in sessions:
        poses = {
            vid: states[(s.session_id, vid)].with_frames(common_frame, s.vertex_frame(vid))
            for vid in s.graph.vertex_ids()
        }
        out.append(s.with_updated_poses(poses, common_frame))
    return out
