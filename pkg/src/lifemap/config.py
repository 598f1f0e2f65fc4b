"""Pipeline configuration: one structured-text file with per-stage sections.

Every value is validated against the owning module's preconditions before a
stage runs; command-line flags override file values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .optimizer import OptimizerConfig
from .place_recognition import MatcherConfig
from .planner import PrmParams, RobotBox


@dataclass(frozen=True)
class OctreeConfig:
    resolution: float = 0.05
    max_range: float = 5.0


@dataclass(frozen=True)
class ElevationConfig:
    resolution: float = 0.05
    dangling_resolutions: tuple[float, ...] = (0.8, 0.4, 0.2)
    dangling_gap: float = 0.3
    stride: float = 0.4
    step_height: float = 0.15
    crop_pad: float = 0.25


@dataclass(frozen=True)
class SynthConfig:
    surface_density: float = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    octree: OctreeConfig = field(default_factory=OctreeConfig)
    place_recognition: MatcherConfig = field(default_factory=MatcherConfig)
    word_count: int = 64
    robust_intra: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    elevation: ElevationConfig = field(default_factory=ElevationConfig)
    planner: PrmParams = field(default_factory=PrmParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    cache_budget: int = 32
    change_threshold: float = 0.05

    def validate(self):
        checks = [
            ("octree.resolution", self.octree.resolution > 0),
            ("octree.max_range", self.octree.max_range > 0),
            ("place_recognition.word_count", self.word_count >= 1),
            ("place_recognition.similarity_threshold",
             0.0 <= self.place_recognition.similarity_threshold <= 1.0),
            ("place_recognition.candidates_per_query",
             self.place_recognition.candidates_per_query >= 1),
            ("place_recognition.ransac_iterations",
             self.place_recognition.ransac_iterations >= 1),
            ("place_recognition.inlier_threshold",
             self.place_recognition.inlier_threshold > 0),
            ("place_recognition.min_inliers", self.place_recognition.min_inliers >= 3),
            ("optimizer.cauchy_scale", self.optimizer.cauchy_scale > 0),
            ("optimizer.max_iterations", self.optimizer.max_iterations >= 1),
            ("optimizer.jacobian", self.optimizer.jacobian in ("analytic", "numeric")),
            ("elevation.resolution", self.elevation.resolution > 0),
            ("elevation.dangling_gap", self.elevation.dangling_gap > 0),
            ("elevation.dangling_resolutions",
             len(self.elevation.dangling_resolutions) > 0
             and all(b < a for a, b in zip(self.elevation.dangling_resolutions,
                                           self.elevation.dangling_resolutions[1:]))
             and all(r > 0 for r in self.elevation.dangling_resolutions)),
            ("elevation.stride", self.elevation.stride > 0),
            ("elevation.step_height", self.elevation.step_height > 0),
            ("planner.samples", self.planner.samples >= 1),
            ("planner.connection_radius", self.planner.connection_radius > 0),
            ("planner.min_traversability",
             0.0 <= self.planner.min_traversability <= 1.0),
            ("synth.surface_density", self.synth.surface_density > 0),
            ("cache_budget", self.cache_budget >= 1),
            ("change_threshold", self.change_threshold > 0),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(key, "invalid value")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Apply one global seed to every seeded stage."""
        return replace(
            self,
            place_recognition=replace(self.place_recognition, seed=seed),
            planner=replace(self.planner, seed=seed),
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["planner"]["box"] = [self.planner.box.x, self.planner.box.y, self.planner.box.z]
        return d

    def sha256(self) -> str:
        return hashlib.sha256(
            json.dumps(self.as_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a mapping")
    return value


def _take(section: dict, section_name: str, key: str, cast, default):
    if key not in section:
        return default
    try:
        return cast(section.pop(key))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section_name}.{key}", str(e)) from None


def _reject_unknown(section: dict, name: str):
    if section:
        raise ConfigError(f"{name}.{sorted(section)[0]}", "unknown key")


def load_config(path: Path | str | None) -> PipelineConfig:
    """Read the YAML config; missing file sections fall back to defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")

    oct_s = _section(raw, "octree")
    octree = OctreeConfig(
        resolution=_take(oct_s, "octree", "resolution", float, 0.05),
        max_range=_take(oct_s, "octree", "max_range", float, 5.0),
    )
    _reject_unknown(oct_s, "octree")

    pr_s = _section(raw, "place_recognition")
    word_count = _take(pr_s, "place_recognition", "word_count", int, 64)
    matcher = MatcherConfig(
        similarity_threshold=_take(pr_s, "place_recognition", "similarity_threshold", float, 0.3),
        candidates_per_query=_take(pr_s, "place_recognition", "candidates_per_query", int, 5),
        ransac_iterations=_take(pr_s, "place_recognition", "ransac_iterations", int, 500),
        inlier_threshold=_take(pr_s, "place_recognition", "inlier_threshold", float, 0.05),
        min_inliers=_take(pr_s, "place_recognition", "min_inliers", int, 10),
        min_sigma=_take(pr_s, "place_recognition", "min_sigma", float, 1e-3),
        seed=_take(pr_s, "place_recognition", "seed", int, 0),
    )
    _reject_unknown(pr_s, "place_recognition")

    opt_s = _section(raw, "optimizer")
    robust_intra = _take(opt_s, "optimizer", "robust_intra", bool, False)
    optimizer = OptimizerConfig(
        cauchy_scale=_take(opt_s, "optimizer", "cauchy_scale", float, 1.0),
        max_iterations=_take(opt_s, "optimizer", "max_iterations", int, 100),
        gradient_tol=_take(opt_s, "optimizer", "gradient_tol", float, 1e-8),
        rel_cost_tol=_take(opt_s, "optimizer", "rel_cost_tol", float, 1e-10),
        lambda_init=_take(opt_s, "optimizer", "lambda_init", float, 1e-4),
        jacobian=str(_take(opt_s, "optimizer", "jacobian", str, "analytic")),
    )
    _reject_unknown(opt_s, "optimizer")

    ele_s = _section(raw, "elevation")
    elevation = ElevationConfig(
        resolution=_take(ele_s, "elevation", "resolution", float, 0.05),
        dangling_resolutions=tuple(
            _take(ele_s, "elevation", "dangling_resolutions",
                  lambda v: [float(x) for x in v], [0.8, 0.4, 0.2])
        ),
        dangling_gap=_take(ele_s, "elevation", "dangling_gap", float, 0.3),
        stride=_take(ele_s, "elevation", "stride", float, 0.4),
        step_height=_take(ele_s, "elevation", "step_height", float, 0.15),
        crop_pad=_take(ele_s, "elevation", "crop_pad", float, 0.25),
    )
    _reject_unknown(ele_s, "elevation")

    pl_s = _section(raw, "planner")
    box_vals = _take(pl_s, "planner", "robot_box", lambda v: [float(x) for x in v],
                     [0.5, 0.5, 1.8])
    if len(box_vals) != 3:
        raise ConfigError("planner.robot_box", "must have three extents")
    planner = PrmParams(
        samples=_take(pl_s, "planner", "samples", int, 2000),
        connection_radius=_take(pl_s, "planner", "connection_radius", float, 1.0),
        min_traversability=_take(pl_s, "planner", "min_traversability", float, 0.5),
        box=RobotBox(*box_vals),
        seed=_take(pl_s, "planner", "seed", int, 0),
    )
    _reject_unknown(pl_s, "planner")

    syn_s = _section(raw, "synth")
    synth = SynthConfig(
        surface_density=_take(syn_s, "synth", "surface_density", float, 0.01),
    )
    _reject_unknown(syn_s, "synth")

    cache_budget = raw.get("cache_budget", 32)
    change_threshold = raw.get("change_threshold", 0.05)

    known = {"octree", "place_recognition", "optimizer", "elevation", "planner",
             "synth", "cache_budget", "change_threshold"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown section")

    cfg = PipelineConfig(
        octree=octree,
        place_recognition=matcher,
        word_count=int(word_count),
        robust_intra=bool(robust_intra),
        optimizer=optimizer,
        elevation=elevation,
        planner=planner,
        synth=synth,
        cache_budget=int(cache_budget),
        change_threshold=float(change_threshold),
    )
    cfg.validate()
    return cfg
