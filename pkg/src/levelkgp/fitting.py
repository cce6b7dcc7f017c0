"""Fitting observed action distributions to a continuous reasoning level.

For one driver and one sufficiently visited state, the observed action
frequencies are compared against the model's predicted policy at a
candidate level using the Kolmogorov-Smirnov statistic over the
serialized action order.  The score is the K-S acceptance probability
(higher means the model explains the data better), maximized over the
level with simulated annealing restarted from each integer level.

A driver's fit succeeds in a state when the best score clears the
acceptance threshold.  The discrete comparison baseline scores only the
integer levels, using the raw level-k policies.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import kolmogorov

from .config import (
    FitConfig,
    GPConfig,
    KernelEntryConfig,
    OptimizerConfig,
    SAConfig,
)
from .errors import InputError, SchemaError
from .gp import ModelCache, Policy, StateGP, fit_state_gp, shift_normalize

logger = logging.getLogger(__name__)


@dataclass
class DriverRecord:
    """Per-state action counts observed for one driver."""

    driver_id: str
    action_count: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.driver_id:
            raise InputError("driver_id must be non-empty")
        if self.action_count < 2:
            raise InputError("need at least two actions")
        fixed = {}
        for sid, row in self.counts.items():
            arr = np.asarray(row, dtype=np.int64)
            if arr.shape != (self.action_count,):
                raise InputError(
                    f"state {sid}: counts must have length {self.action_count}"
                )
            if np.any(arr < 0):
                raise InputError(f"state {sid}: counts must be non-negative")
            fixed[int(sid)] = arr
        self.counts = fixed

    def add(self, state_id: int, action: int):
        row = self.counts.setdefault(
            int(state_id), np.zeros(self.action_count, dtype=np.int64)
        )
        if not 0 <= action < self.action_count:
            raise InputError(f"action {action} out of range")
        row[action] += 1

    def n_visits(self, state_id: int) -> int:
        row = self.counts.get(int(state_id))
        return 0 if row is None else int(row.sum())

    def states(self) -> list[int]:
        return sorted(self.counts)

    def to_dict(self) -> dict:
        return {
            "driver_id": self.driver_id,
            "action_count": self.action_count,
            "counts": {str(s): self.counts[s].tolist() for s in self.states()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DriverRecord":
        try:
            counts = {int(s): np.asarray(v) for s, v in doc["counts"].items()}
            return cls(
                driver_id=doc["driver_id"],
                action_count=int(doc["action_count"]),
                counts=counts,
            )
        except KeyError as exc:
            raise SchemaError(f"driver record missing key {exc}") from exc


def empirical_policy(counts, floor: float = 0.01) -> Policy:
    """Observed frequencies with small entries floored then renormalized.

    The floor keeps the K-S comparison away from exact zeros, which the
    model policies never produce.
    """
    arr = np.asarray(counts, dtype=float).ravel()
    if arr.size < 2:
        raise InputError("need counts for at least two actions")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InputError("counts must be non-negative and finite")
    total = arr.sum()
    if total <= 0:
        raise InputError("counts must not be all zero")
    freq = arr / total
    freq = np.maximum(freq, floor)
    return Policy(freq / freq.sum())


def ks_statistic(p: Policy, q: Policy) -> float:
    """Max gap between the cumulative distributions over the action order."""
    if len(p) != len(q):
        raise InputError("policies must share an action count")
    return float(np.max(np.abs(np.cumsum(p.probs) - np.cumsum(q.probs))))


def ks_acceptance(d: float, n: int, n2: Optional[int] = None) -> float:
    """K-S acceptance probability for statistic d at sample size n.

    Uses the asymptotic Kolmogorov survival function with the standard
    finite-sample correction.  With n2 the two-sample effective size
    n*n2/(n+n2) replaces n.
    """
    if not 0 <= d <= 1:
        raise InputError(f"statistic must lie in [0, 1], got {d}")
    if n < 1 or (n2 is not None and n2 < 1):
        raise InputError("sample sizes must be positive")
    en = math.sqrt(n * n2 / (n + n2)) if n2 is not None else math.sqrt(n)
    return float(kolmogorov(d * (en + 0.12 + 0.11 / en)))


def score_policy(model: Policy, data: Policy, n_obs: int, fit_cfg: FitConfig) -> float:
    """Acceptance probability of the data under the model policy."""
    d = ks_statistic(model, data)
    n2 = n_obs if fit_cfg.two_sample else None
    return ks_acceptance(d, n_obs, n2)


@dataclass(frozen=True)
class FitResult:
    """Outcome of fitting one driver in one state."""

    state_id: int
    n_obs: int
    level: float
    crit: float
    success: bool
    method: str
    restarts: tuple[tuple[float, float], ...] = ()


@dataclass
class DriverReport:
    """All per-state fits for one driver under one method."""

    driver_id: str
    method: str
    n_states_observed: int
    results: list[FitResult] = field(default_factory=list)

    @property
    def n_comparisons(self) -> int:
        return len(self.results)

    @property
    def n_success(self) -> int:
        return sum(1 for r in self.results if r.success)

    @property
    def percent_explained(self) -> Optional[float]:
        if not self.results:
            return None
        return 100.0 * self.n_success / self.n_comparisons

    def to_dict(self) -> dict:
        return {
            "driver_id": self.driver_id,
            "method": self.method,
            "n_states_observed": self.n_states_observed,
            "n_comparisons": self.n_comparisons,
            "n_success": self.n_success,
            "percent_explained": self.percent_explained,
            "results": [
                {
                    "state_id": r.state_id,
                    "n_obs": r.n_obs,
                    "level": r.level,
                    "crit": r.crit,
                    "success": r.success,
                    "method": r.method,
                    "restarts": [list(t) for t in r.restarts],
                }
                for r in self.results
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DriverReport":
        results = [
            FitResult(
                state_id=int(r["state_id"]),
                n_obs=int(r["n_obs"]),
                level=float(r["level"]),
                crit=float(r["crit"]),
                success=bool(r["success"]),
                method=r["method"],
                restarts=tuple(tuple(t) for t in r["restarts"]),
            )
            for r in doc["results"]
        ]
        return cls(
            driver_id=doc["driver_id"],
            method=doc["method"],
            n_states_observed=int(doc["n_states_observed"]),
            results=results,
        )


def sa_search(
    score_fn: Callable[[float], float],
    init_level: float,
    sa_cfg: SAConfig,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Maximize score_fn over the level range by simulated annealing.

    Proposals are Gaussian steps whose scale shrinks with the
    temperature.  The default acceptance rule always takes improvements
    and takes a worse candidate with probability exp(-delta/T); setting
    paper_acceptance_sign flips delta, reproducing the published rule
    that damps improvements instead.  The best level seen anywhere in
    the walk is returned.
    """
    low, high = sa_cfg.level_low, sa_cfg.level_high
    level = float(np.clip(init_level, low, high))
    score = score_fn(level)
    best_level, best_score = level, score
    temp = sa_cfg.initial_temperature
    span = high - low
    for _ in range(sa_cfg.max_steps):
        scale = sa_cfg.neighbor_scale * (temp / sa_cfg.initial_temperature) * span
        candidate = float(np.clip(level + rng.normal(0.0, scale), low, high))
        cand_score = score_fn(candidate)
        if sa_cfg.paper_acceptance_sign:
            delta = cand_score - score
        else:
            delta = score - cand_score
        if delta <= 0 or rng.random() < math.exp(-delta / temp):
            level, score = candidate, cand_score
        if score > best_score:
            best_level, best_score = level, score
        temp *= sa_cfg.cooling
    return best_level, best_score


def _driver_key(driver_id: str) -> int:
    """Stable integer for seeding, independent of process hash salt."""
    return zlib.crc32(driver_id.encode("utf-8"))


def restart_rng(
    master_seed: int, driver_id: str, state_id: int, restart: int
) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, _driver_key(driver_id), state_id, restart])
    )


def level_landscape(
    model: StateGP,
    data: Policy,
    n_obs: int,
    fit_cfg: FitConfig,
    step: float = 0.01,
    low: float = 0.0,
    high: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Score on a dense level grid; the exhaustive reference search."""
    levels = np.arange(low, high + step / 2, step)
    means = model.predict_mean(levels)
    scores = np.empty(levels.size)
    for i in range(levels.size):
        scores[i] = score_policy(shift_normalize(means[i]), data, n_obs, fit_cfg)
    return levels, scores


def grid_fit(
    model: StateGP,
    data: Policy,
    n_obs: int,
    fit_cfg: FitConfig,
    step: float = 0.01,
) -> tuple[float, float]:
    levels, scores = level_landscape(model, data, n_obs, fit_cfg, step)
    i = int(np.argmax(scores))
    return float(levels[i]), float(scores[i])


class LevelFitter:
    """Binds the models and configs needed to fit drivers.

    ``observation_set_builder`` maps a state id to the discrete-level
    policies [pi_0, ..., pi_K] for that state.  GP models are built on
    demand and cached, so a shared cache amortizes fits across drivers.
    Thread safe; ``compare_driver`` can fan out over states.
    """

    def __init__(
        self,
        observation_set_builder: Callable[[int], Sequence[Policy]],
        discrete_levels: Sequence[float] = (0.0, 1.0, 2.0, 3.0),
        bank_entries: Optional[Sequence[KernelEntryConfig]] = None,
        optimizer: Optional[OptimizerConfig] = None,
        gp_config: Optional[GPConfig] = None,
        fit_cfg: Optional[FitConfig] = None,
        sa_cfg: Optional[SAConfig] = None,
        master_seed: int = 0,
        cache: Optional[ModelCache] = None,
    ):
        self.builder = observation_set_builder
        self.discrete_levels = tuple(float(v) for v in discrete_levels)
        self.bank_entries = bank_entries
        self.optimizer = optimizer
        self.gp_config = gp_config
        self.fit_cfg = fit_cfg or FitConfig()
        self.sa_cfg = sa_cfg or SAConfig()
        self.master_seed = master_seed
        self.cache = cache if cache is not None else ModelCache()

    def model_for(self, state_id: int) -> StateGP:
        def build() -> StateGP:
            policies = self.builder(state_id)
            return fit_state_gp(
                self.discrete_levels,
                policies,
                bank_entries=self.bank_entries,
                optimizer=self.optimizer,
                gp_config=self.gp_config,
                state_id=state_id,
            )

        return self.cache.get_or_fit(state_id, build)

    # -- single-state fits -------------------------------------------------

    def fit_state(
        self, driver_id: str, state_id: int, counts, search: str = "sa"
    ) -> FitResult:
        n_obs = int(np.asarray(counts).sum())
        data = empirical_policy(counts, self.fit_cfg.probability_floor)
        model = self.model_for(state_id)

        def score(level: float) -> float:
            return score_policy(
                model.policy_at(level), data, n_obs, self.fit_cfg
            )

        if search == "sa":
            restarts = []
            for r, init in enumerate(self.sa_cfg.restart_levels):
                rng = restart_rng(self.master_seed, driver_id, state_id, r)
                restarts.append(sa_search(score, init, self.sa_cfg, rng))
            best_level, best_crit = max(restarts, key=lambda t: t[1])
            restart_log = tuple((float(l), float(c)) for l, c in restarts)
        elif search == "grid":
            best_level, best_crit = grid_fit(model, data, n_obs, self.fit_cfg)
            restart_log = ((best_level, best_crit),)
        else:
            raise InputError(f"unknown search {search!r}")
        return FitResult(
            state_id=state_id,
            n_obs=n_obs,
            level=float(best_level),
            crit=float(best_crit),
            success=bool(best_crit > self.fit_cfg.theta_th),
            method=search,
            restarts=restart_log,
        )

    def fit_state_discrete(self, state_id: int, counts) -> FitResult:
        """Score the raw integer-level policies only."""
        n_obs = int(np.asarray(counts).sum())
        data = empirical_policy(counts, self.fit_cfg.probability_floor)
        policies = self.builder(state_id)
        scored = [
            (float(k), score_policy(pi, data, n_obs, self.fit_cfg))
            for k, pi in zip(self.discrete_levels, policies)
        ]
        best_level, best_crit = max(scored, key=lambda t: t[1])
        return FitResult(
            state_id=state_id,
            n_obs=n_obs,
            level=best_level,
            crit=best_crit,
            success=bool(best_crit > self.fit_cfg.theta_th),
            method="discrete",
            restarts=tuple(scored),
        )

    # -- whole-driver comparisons -------------------------------------------

    def _eligible(self, record: DriverRecord) -> list[int]:
        return [
            sid for sid in record.states() if record.n_visits(sid) >= self.fit_cfg.n_th
        ]

    def compare_driver(
        self, record: DriverRecord, search: str = "sa", jobs: int = 1
    ) -> DriverReport:
        """Fit every sufficiently visited state of one driver."""
        eligible = self._eligible(record)
        method = "continuous" if search == "sa" else f"continuous-{search}"
        report = DriverReport(
            driver_id=record.driver_id,
            method=method,
            n_states_observed=len(record.states()),
        )
        if jobs > 1 and len(eligible) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = [
                    pool.submit(
                        self.fit_state, record.driver_id, sid, record.counts[sid], search
                    )
                    for sid in eligible
                ]
                report.results = [f.result() for f in futures]
        else:
            report.results = [
                self.fit_state(record.driver_id, sid, record.counts[sid], search)
                for sid in eligible
            ]
        return report

    def compare_driver_discrete(self, record: DriverRecord) -> DriverReport:
        report = DriverReport(
            driver_id=record.driver_id,
            method="discrete",
            n_states_observed=len(record.states()),
        )
        report.results = [
            self.fit_state_discrete(sid, record.counts[sid])
            for sid in self._eligible(record)
        ]
        return report


def save_reports(reports: Sequence[DriverReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, sort_keys=True)


def load_reports(path) -> list[DriverReport]:
    with open(path) as fh:
        docs = json.load(fh)
    return [DriverReport.from_dict(d) for d in docs]
