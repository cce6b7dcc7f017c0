"""Dataclass configuration objects and the JSON master config.

Every tunable lives here so experiments are reproducible from a single
file.  ``MasterConfig.from_json`` accepts a partial document; anything
omitted keeps its default.  Unknown keys are rejected so typos fail
loudly instead of being silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .errors import ConfigurationError

DEFAULT_MATERN_LENGTH_SCALES = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
MAX_COREGIONAL_RANK = 7


@dataclass(frozen=True)
class KernelEntryConfig:
    """One entry of the kernel bank.

    ``kind`` is "bias" or "matern32".  ``length_scale`` applies only to
    the Matern entry and must be positive.  ``rank`` bounds the low-rank
    part of the coregionalization matrix; None means min(D, 7) where D
    is the modeled output dimension.
    """

    kind: str
    length_scale: Optional[float] = None
    rank: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("bias", "matern32"):
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "matern32":
            if self.length_scale is None or self.length_scale <= 0:
                raise ConfigurationError(
                    "matern32 entry needs a positive length_scale"
                )
        if self.rank is not None and self.rank < 1:
            raise ConfigurationError("rank must be at least 1")


def default_bank_entries() -> tuple[KernelEntryConfig, ...]:
    """One bias entry plus six Matern entries on a fixed length-scale grid."""
    entries = [KernelEntryConfig(kind="bias")]
    entries += [
        KernelEntryConfig(kind="matern32", length_scale=ls)
        for ls in DEFAULT_MATERN_LENGTH_SCALES
    ]
    return tuple(entries)


@dataclass(frozen=True)
class OptimizerConfig:
    """L-BFGS-B settings for marginal-likelihood maximization."""

    restarts: int = 4
    max_iter: int = 200
    seed: int = 0
    log_variance_bounds: tuple[float, float] = (-12.0, 6.0)
    weight_bound: float = 5.0
    raw_kappa_bounds: tuple[float, float] = (-12.0, 6.0)

    def __post_init__(self):
        if self.restarts < 1:
            raise ConfigurationError("optimizer needs at least one restart")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be positive")


@dataclass(frozen=True)
class GPConfig:
    """Posterior numerics: training levels and jitter escalation."""

    levels: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    jitter: float = 1e-6
    max_jitter: float = 1e-2

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ConfigurationError("need at least two training levels")
        if sorted(set(self.levels)) != sorted(self.levels):
            raise ConfigurationError("training levels must be distinct")
        if not 0 < self.jitter <= self.max_jitter:
            raise ConfigurationError("require 0 < jitter <= max_jitter")


@dataclass(frozen=True)
class EnvConfig:
    """Ring-road traffic environment.

    Distances in meters, speeds in m/s.  The discretizer bins are chosen
    so the reachable state space stays near a thousand states, which a
    tabular learner covers in a few hundred episodes.
    """

    n_lanes: int = 3
    n_vehicles: int = 10
    ring_length: float = 300.0
    dt: float = 0.5
    speed_max: float = 25.0
    accel: float = 2.0
    decel: float = -2.0
    hard_brake: float = -6.0
    collision_gap: float = 2.0
    lane_change_min_rear_gap: float = 6.0
    front_gap_edges: tuple[float, ...] = (8.0, 20.0, 40.0)
    rear_gap_edges: tuple[float, ...] = (6.0, 15.0)
    rel_speed_threshold: float = 1.0
    speed_bin_count: int = 4
    episode_steps: int = 60
    w_speed: float = 1.0
    w_collision: float = 10.0
    w_lane_change: float = 0.15

    def __post_init__(self):
        if self.n_lanes < 2:
            raise ConfigurationError("need at least two lanes")
        if self.n_vehicles < 2:
            raise ConfigurationError("need at least two vehicles")
        if self.dt <= 0 or self.ring_length <= 0 or self.speed_max <= 0:
            raise ConfigurationError("dt, ring_length, speed_max must be positive")
        if list(self.front_gap_edges) != sorted(self.front_gap_edges):
            raise ConfigurationError("front_gap_edges must be increasing")
        if list(self.rear_gap_edges) != sorted(self.rear_gap_edges):
            raise ConfigurationError("rear_gap_edges must be increasing")


@dataclass(frozen=True)
class RLConfig:
    """Tabular Q-learning schedule for the discrete level hierarchy."""

    max_level: int = 3
    episodes: int = 300
    learning_rate: float = 0.2
    discount: float = 0.95
    epsilon_start: float = 0.4
    epsilon_end: float = 0.05

    def __post_init__(self):
        if self.max_level < 1:
            raise ConfigurationError("max_level must be at least 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigurationError("learning_rate must lie in (0, 1]")
        if not 0 <= self.discount < 1:
            raise ConfigurationError("discount must lie in [0, 1)")


@dataclass(frozen=True)
class SAConfig:
    """Simulated annealing schedule for the level search.

    ``paper_acceptance_sign`` keeps the published acceptance rule, which
    accepts improvements only with probability exp(-delta/T).  The
    default corrected rule always accepts improvements.
    """

    initial_temperature: float = 2.0
    cooling: float = 0.90
    max_steps: int = 50
    neighbor_scale: float = 0.25
    restart_levels: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    level_low: float = 0.0
    level_high: float = 3.0
    paper_acceptance_sign: bool = False

    def __post_init__(self):
        if self.initial_temperature <= 0:
            raise ConfigurationError("initial_temperature must be positive")
        if not 0 < self.cooling < 1:
            raise ConfigurationError("cooling must lie in (0, 1)")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        if self.level_high <= self.level_low:
            raise ConfigurationError("level_high must exceed level_low")
        for lv in self.restart_levels:
            if not self.level_low <= lv <= self.level_high:
                raise ConfigurationError("restart level outside the level range")


@dataclass(frozen=True)
class FitConfig:
    """Per-driver fitting thresholds."""

    n_th: int = 30
    theta_th: float = 0.05
    probability_floor: float = 0.01
    two_sample: bool = False

    def __post_init__(self):
        if self.n_th < 1:
            raise ConfigurationError("n_th must be positive")
        if not 0 < self.theta_th < 1:
            raise ConfigurationError("theta_th must lie in (0, 1)")
        if not 0 < self.probability_floor < 0.5:
            raise ConfigurationError("probability_floor must lie in (0, 0.5)")


@dataclass(frozen=True)
class DataConfig:
    """Trajectory file interpretation."""

    frame_dt: float = 0.1
    accel_threshold: float = 0.5
    hard_brake_threshold: float = -2.5

    def __post_init__(self):
        if self.frame_dt <= 0:
            raise ConfigurationError("frame_dt must be positive")
        if self.accel_threshold <= 0:
            raise ConfigurationError("accel_threshold must be positive")
        if self.hard_brake_threshold >= 0:
            raise ConfigurationError("hard_brake_threshold must be negative")


@dataclass(frozen=True)
class DriverSpec:
    """A synthetic driver: a reasoning level and a sample budget."""

    driver_id: str
    level: float
    samples_per_state: int = 200

    def __post_init__(self):
        if not self.driver_id:
            raise ConfigurationError("driver_id must be non-empty")
        if self.samples_per_state < 1:
            raise ConfigurationError("samples_per_state must be positive")


@dataclass(frozen=True)
class SynthesisConfig:
    """Synthetic driver population used by the pipeline."""

    n_states: int = 8
    min_state_visits: int = 5
    drivers: tuple[DriverSpec, ...] = (
        DriverSpec("driver-a", 0.5),
        DriverSpec("driver-b", 1.5),
        DriverSpec("driver-c", 2.5),
    )

    def __post_init__(self):
        if self.n_states < 1:
            raise ConfigurationError("n_states must be positive")
        ids = [d.driver_id for d in self.drivers]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("driver ids must be unique")


@dataclass(frozen=True)
class MasterConfig:
    """Everything a pipeline run needs, bundled."""

    seed: int = 0
    jobs: int = 1
    out_dir: str = "out"
    env: EnvConfig = field(default_factory=EnvConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    bank: tuple[KernelEntryConfig, ...] = field(default_factory=default_bank_entries)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    gp: GPConfig = field(default_factory=GPConfig)
    sa: SAConfig = field(default_factory=SAConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    @classmethod
    def from_json(cls, path: str | Path) -> "MasterConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("master config must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MasterConfig":
        kwargs: dict[str, Any] = {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown master config keys: {sorted(unknown)}")
        for key in ("seed", "jobs", "out_dir"):
            if key in doc:
                kwargs[key] = doc[key]
        simple = {
            "env": EnvConfig,
            "rl": RLConfig,
            "optimizer": OptimizerConfig,
            "gp": GPConfig,
            "sa": SAConfig,
            "fit": FitConfig,
            "data": DataConfig,
        }
        for key, klass in simple.items():
            if key in doc:
                kwargs[key] = _build(klass, doc[key], key)
        if "bank" in doc:
            kwargs["bank"] = tuple(
                _build(KernelEntryConfig, entry, f"bank[{i}]")
                for i, entry in enumerate(doc["bank"])
            )
        if "synthesis" in doc:
            synth = doc["synthesis"]
            if not isinstance(synth, SynthesisConfig):
                synth = dict(synth)
                if "drivers" in synth:
                    synth["drivers"] = tuple(
                        _build(DriverSpec, d, f"drivers[{i}]")
                        for i, d in enumerate(synth["drivers"])
                    )
            kwargs["synthesis"] = _build(SynthesisConfig, synth, "synthesis")
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return _as_plain(dataclasses.asdict(self))


def _build(klass, doc, label: str):
    if isinstance(doc, klass):
        return doc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{label} must be a JSON object")
    known = {f.name for f in dataclasses.fields(klass)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {label}: {sorted(unknown)}")
    fixed = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in doc.items()
    }
    try:
        return klass(**fixed)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {label}: {exc}") from exc


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


def resolve_rank(requested: Optional[int], output_dim: int) -> int:
    """Effective low-rank width: min(D, 7) unless explicitly set."""
    if requested is None:
        return min(output_dim, MAX_COREGIONAL_RANK)
    return min(requested, output_dim)
