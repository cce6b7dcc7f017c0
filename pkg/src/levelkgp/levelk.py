"""Discrete level-k policies on a ring-road driving environment.

Level 0 is a hand-written gap-keeping rule.  Level k best-responds to
traffic that plays level k-1, learned with tabular Q-learning over a
discretized state (lane, front gap, closing speed, rear gaps in the
adjacent lanes, own speed).  The state space is a few thousand ids, so
a few hundred episodes give usable coverage.

All randomness flows through explicit generators seeded per level;
training is deterministic for a fixed (config, seed).
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import EnvConfig, RLConfig
from .errors import InputError, MissingStateError, SchemaError
from .gp import Policy

logger = logging.getLogger(__name__)

ACTIONS = ("maintain", "accelerate", "decelerate", "hard_brake", "change_lane")
MAINTAIN, ACCELERATE, DECELERATE, HARD_BRAKE, CHANGE_LANE = range(5)
N_ACTIONS = len(ACTIONS)

REL_SLOWER, REL_STEADY, REL_FASTER = range(3)


@dataclass(frozen=True)
class EnvState:
    """Discretized ego observation.

    rear bins use 0 for "no adjacent lane on that side"; gap bins start
    at 1 once the lane exists.
    """

    lane: int
    front_gap_bin: int
    front_rel_speed_bin: int
    rear_left_bin: int
    rear_right_bin: int
    speed_bin: int

    def fields(self) -> tuple[int, ...]:
        return (
            self.lane,
            self.front_gap_bin,
            self.front_rel_speed_bin,
            self.rear_left_bin,
            self.rear_right_bin,
            self.speed_bin,
        )


class Discretizer:
    """Maps continuous features to EnvState and state ids (mixed radix)."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.front_bins = len(cfg.front_gap_edges) + 1
        self.rear_bins = len(cfg.rear_gap_edges) + 2
        self.cardinalities = (
            cfg.n_lanes,
            self.front_bins,
            3,
            self.rear_bins,
            self.rear_bins,
            cfg.speed_bin_count,
        )

    @property
    def n_states(self) -> int:
        return int(np.prod(self.cardinalities))

    def state_id(self, state: EnvState) -> int:
        sid = 0
        for value, card in zip(state.fields(), self.cardinalities):
            if not 0 <= value < card:
                raise InputError(f"state field {value} outside radix {card}")
            sid = sid * card + value
        return sid

    def state_from_id(self, sid: int) -> EnvState:
        if not 0 <= sid < self.n_states:
            raise InputError(f"state id {sid} out of range")
        values = []
        for card in reversed(self.cardinalities):
            values.append(sid % card)
            sid //= card
        lane, fg, rs, rl, rr, sp = reversed(values)
        return EnvState(lane, fg, rs, rl, rr, sp)

    # -- feature binning ---------------------------------------------------

    def front_gap_bin(self, gap: float) -> int:
        return int(bisect.bisect_right(self.cfg.front_gap_edges, gap))

    def rel_speed_bin(self, rel: float) -> int:
        if rel < -self.cfg.rel_speed_threshold:
            return REL_SLOWER
        if rel > self.cfg.rel_speed_threshold:
            return REL_FASTER
        return REL_STEADY

    def rear_bin(self, gap: Optional[float]) -> int:
        if gap is None:
            return 0
        return 1 + int(bisect.bisect_right(self.cfg.rear_gap_edges, gap))

    def speed_bin(self, speed: float) -> int:
        width = self.cfg.speed_max / self.cfg.speed_bin_count
        return min(int(speed / width), self.cfg.speed_bin_count - 1)

    def discretize(
        self,
        lane: int,
        front_gap: float,
        front_rel_speed: float,
        rear_left_gap: Optional[float],
        rear_right_gap: Optional[float],
        speed: float,
    ) -> EnvState:
        return EnvState(
            lane=lane,
            front_gap_bin=self.front_gap_bin(front_gap),
            front_rel_speed_bin=self.rel_speed_bin(front_rel_speed),
            rear_left_bin=self.rear_bin(rear_left_gap),
            rear_right_bin=self.rear_bin(rear_right_gap),
            speed_bin=self.speed_bin(speed),
        )

    # -- inverse map, used when emitting synthetic trajectories -------------

    def representative_front_gap(self, b: int) -> float:
        edges = self.cfg.front_gap_edges
        if b == 0:
            return edges[0] / 2.0
        if b < len(edges):
            return (edges[b - 1] + edges[b]) / 2.0
        return edges[-1] * 1.5

    def representative_rel_speed(self, b: int) -> float:
        thr = self.cfg.rel_speed_threshold
        return (-3.0 * thr, 0.0, 3.0 * thr)[b]

    def representative_rear_gap(self, b: int) -> Optional[float]:
        if b == 0:
            return None
        edges = self.cfg.rear_gap_edges
        if b == 1:
            return edges[0] / 2.0
        if b - 1 < len(edges):
            return (edges[b - 2] + edges[b - 1]) / 2.0
        return edges[-1] * 1.5

    def representative_speed(self, b: int) -> float:
        width = self.cfg.speed_max / self.cfg.speed_bin_count
        return (b + 0.5) * width

    def representative_features(self, state: EnvState) -> dict:
        return {
            "lane": state.lane,
            "front_gap": self.representative_front_gap(state.front_gap_bin),
            "front_rel_speed": self.representative_rel_speed(state.front_rel_speed_bin),
            "rear_left_gap": self.representative_rear_gap(state.rear_left_bin),
            "rear_right_gap": self.representative_rear_gap(state.rear_right_bin),
            "speed": self.representative_speed(state.speed_bin),
        }


@dataclass
class StepResult:
    rewards: np.ndarray
    collided: np.ndarray
    lane_changed: np.ndarray


class HighwayEnv:
    """Ring road shared by n_vehicles; vehicle 0 is the ego.

    Kinematics are pointwise: a vehicle is a position on the ring plus
    a speed and a lane.  Rear-end proximity below collision_gap counts
    as a collision charged to the follower, whose position is clamped
    behind the leader.
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.disc = Discretizer(cfg)
        self.rng = rng
        self.pos = np.zeros(cfg.n_vehicles)
        self.vel = np.zeros(cfg.n_vehicles)
        self.lane = np.zeros(cfg.n_vehicles, dtype=int)
        self.reset()

    def reset(self):
        cfg = self.cfg
        spacing = cfg.ring_length / cfg.n_vehicles
        jitter = self.rng.uniform(-0.3 * spacing, 0.3 * spacing, cfg.n_vehicles)
        self.pos = (np.arange(cfg.n_vehicles) * spacing + jitter) % cfg.ring_length
        self.vel = self.rng.uniform(0.3 * cfg.speed_max, 0.8 * cfg.speed_max, cfg.n_vehicles)
        self.lane = self.rng.integers(0, cfg.n_lanes, cfg.n_vehicles)

    # -- geometry ------------------------------------------------------------

    def _lane_order(self) -> list[list[tuple[float, int]]]:
        lanes: list[list[tuple[float, int]]] = [[] for _ in range(self.cfg.n_lanes)]
        for idx in range(self.cfg.n_vehicles):
            lanes[self.lane[idx]].append((float(self.pos[idx]), idx))
        for entries in lanes:
            entries.sort()
        return lanes

    def _ahead(self, lanes, lane: int, pos: float, skip: int) -> tuple[float, Optional[int]]:
        """Gap and index of the nearest vehicle ahead in the lane."""
        entries = [e for e in lanes[lane] if e[1] != skip]
        if not entries:
            return self.cfg.ring_length, None
        positions = [e[0] for e in entries]
        i = bisect.bisect_right(positions, pos)
        nxt = entries[i % len(entries)]
        gap = (nxt[0] - pos) % self.cfg.ring_length
        if gap == 0.0:
            gap = self.cfg.ring_length
        return gap, nxt[1]

    def _behind(self, lanes, lane: int, pos: float, skip: int) -> tuple[float, Optional[int]]:
        entries = [e for e in lanes[lane] if e[1] != skip]
        if not entries:
            return self.cfg.ring_length, None
        positions = [e[0] for e in entries]
        i = bisect.bisect_left(positions, pos)
        prev = entries[(i - 1) % len(entries)]
        gap = (pos - prev[0]) % self.cfg.ring_length
        if gap == 0.0:
            gap = self.cfg.ring_length
        return gap, prev[1]

    def state_of(self, idx: int, lanes=None) -> EnvState:
        lanes = lanes if lanes is not None else self._lane_order()
        lane = int(self.lane[idx])
        pos = float(self.pos[idx])
        front_gap, leader = self._ahead(lanes, lane, pos, idx)
        rel = 0.0 if leader is None else float(self.vel[leader] - self.vel[idx])
        rear_left = None
        if lane - 1 >= 0:
            rear_left, _ = self._behind(lanes, lane - 1, pos, idx)
        rear_right = None
        if lane + 1 < self.cfg.n_lanes:
            rear_right, _ = self._behind(lanes, lane + 1, pos, idx)
        return self.disc.discretize(
            lane, front_gap, rel, rear_left, rear_right, float(self.vel[idx])
        )

    def states(self) -> list[EnvState]:
        lanes = self._lane_order()
        return [self.state_of(i, lanes) for i in range(self.cfg.n_vehicles)]

    def _lane_change_ok(self, lanes, idx: int, target: int) -> bool:
        if not 0 <= target < self.cfg.n_lanes:
            return False
        pos = float(self.pos[idx])
        rear_gap, rear = self._behind(lanes, target, pos, idx)
        front_gap, front = self._ahead(lanes, target, pos, idx)
        if rear is not None and rear_gap < self.cfg.lane_change_min_rear_gap:
            return False
        if front is not None and front_gap < self.cfg.collision_gap:
            return False
        return True

    def _lane_change_target(self, lanes, idx: int) -> Optional[int]:
        """Adjacent lane with the larger headway among the safe ones."""
        lane = int(self.lane[idx])
        pos = float(self.pos[idx])
        best = None
        best_gap = -1.0
        for target in (lane - 1, lane + 1):
            if not self._lane_change_ok(lanes, idx, target):
                continue
            gap, _ = self._ahead(lanes, target, pos, idx)
            if gap > best_gap:
                best_gap = gap
                best = target
        return best

    def step(self, actions: Sequence[int]) -> StepResult:
        cfg = self.cfg
        n = cfg.n_vehicles
        if len(actions) != n:
            raise InputError("one action per vehicle required")
        lanes = self._lane_order()
        changed = np.zeros(n, dtype=bool)
        for idx in range(n):
            if actions[idx] == CHANGE_LANE:
                target = self._lane_change_target(lanes, idx)
                if target is not None:
                    self.lane[idx] = target
                    changed[idx] = True
        # leaders are fixed after the lane-change phase, before anyone moves
        lanes = self._lane_order()
        leaders = [
            self._ahead(lanes, int(self.lane[idx]), float(self.pos[idx]), idx)
            for idx in range(n)
        ]
        accel_of = {
            MAINTAIN: 0.0,
            ACCELERATE: cfg.accel,
            DECELERATE: cfg.decel,
            HARD_BRAKE: cfg.hard_brake,
            CHANGE_LANE: 0.0,
        }
        for idx in range(n):
            a = accel_of[int(actions[idx])]
            self.vel[idx] = float(np.clip(self.vel[idx] + a * cfg.dt, 0.0, cfg.speed_max))
            self.pos[idx] = (self.pos[idx] + self.vel[idx] * cfg.dt) % cfg.ring_length
        # the follower collides when the headway closes below collision_gap;
        # a negative projected gap means it would have passed through
        collided = np.zeros(n, dtype=bool)
        for idx in range(n):
            gap, leader = leaders[idx]
            if leader is None:
                continue
            projected = gap + (self.vel[leader] - self.vel[idx]) * cfg.dt
            if projected < cfg.collision_gap:
                collided[idx] = True
                self.pos[idx] = (self.pos[leader] - cfg.collision_gap) % cfg.ring_length
                self.vel[idx] = float(self.vel[leader])
        rewards = (
            cfg.w_speed * self.vel / cfg.speed_max
            - cfg.w_collision * collided
            - cfg.w_lane_change * changed
        )
        return StepResult(rewards=rewards, collided=collided, lane_changed=changed)


def level0_policy(state: EnvState, epsilon: float = 0.01) -> Policy:
    """Gap-keeping rule with epsilon mass spread over the other actions."""
    if state.front_gap_bin == 0:
        pick = HARD_BRAKE
    elif state.front_gap_bin == 1:
        pick = DECELERATE if state.front_rel_speed_bin == REL_SLOWER else MAINTAIN
    elif state.front_gap_bin == 2:
        pick = MAINTAIN if state.front_rel_speed_bin == REL_SLOWER else ACCELERATE
    else:
        pick = ACCELERATE
    probs = np.full(N_ACTIONS, epsilon / (N_ACTIONS - 1))
    probs[pick] = 1.0 - epsilon
    return Policy(probs)


def softmax_policy(q_values) -> Policy:
    """Softmax with max subtraction; equal values give uniform."""
    q = np.asarray(q_values, dtype=float).ravel()
    if q.size < 2:
        raise InputError("need at least two action values")
    if not np.all(np.isfinite(q)):
        raise InputError("action values must be finite")
    z = np.exp(q - q.max())
    return Policy(z / z.sum())


@dataclass
class QTable:
    """Tabular action values for one reasoning level."""

    level: int
    action_count: int
    q: dict[int, np.ndarray]
    visits: dict[int, int]

    def values(self, sid: int) -> np.ndarray:
        try:
            return self.q[sid]
        except KeyError:
            raise MissingStateError(sid) from None

    def policy(self, sid: int) -> Policy:
        return softmax_policy(self.values(sid))

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "action_count": self.action_count,
            "q": {str(s): v.tolist() for s, v in sorted(self.q.items())},
            "visits": {str(s): int(v) for s, v in sorted(self.visits.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QTable":
        try:
            return cls(
                level=int(doc["level"]),
                action_count=int(doc["action_count"]),
                q={int(s): np.asarray(v, dtype=float) for s, v in doc["q"].items()},
                visits={int(s): int(v) for s, v in doc["visits"].items()},
            )
        except KeyError as exc:
            raise SchemaError(f"q-table document missing key {exc}") from exc


def _sample(policy: Policy, rng: np.random.Generator) -> int:
    return int(rng.choice(policy.probs.size, p=policy.probs))


def train_level(
    level: int,
    opponent: Callable[[EnvState, np.random.Generator], int],
    env_cfg: EnvConfig,
    rl_cfg: RLConfig,
    seed: int,
) -> QTable:
    """Q-learning for one level against homogeneous opponent traffic."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, level]))
    env = HighwayEnv(env_cfg, rng)
    disc = env.disc
    q: dict[int, np.ndarray] = {}
    visits: dict[int, int] = {}
    for episode in range(rl_cfg.episodes):
        frac = episode / max(rl_cfg.episodes - 1, 1)
        eps = rl_cfg.epsilon_start + frac * (rl_cfg.epsilon_end - rl_cfg.epsilon_start)
        env.reset()
        states = env.states()
        sid = disc.state_id(states[0])
        for _ in range(env_cfg.episode_steps):
            values = q.setdefault(sid, np.zeros(N_ACTIONS))
            visits[sid] = visits.get(sid, 0) + 1
            if rng.random() < eps:
                action = int(rng.integers(N_ACTIONS))
            else:
                action = int(np.argmax(values))
            actions = [action]
            for other in range(1, env_cfg.n_vehicles):
                actions.append(opponent(states[other], rng))
            result = env.step(actions)
            states = env.states()
            next_sid = disc.state_id(states[0])
            next_values = q.get(next_sid)
            bootstrap = 0.0 if next_values is None else float(next_values.max())
            target = float(result.rewards[0]) + rl_cfg.discount * bootstrap
            values[action] += rl_cfg.learning_rate * (target - values[action])
            sid = next_sid
    return QTable(level=level, action_count=N_ACTIONS, q=q, visits=visits)


class PolicySet:
    """Level-0 rule plus trained tables; serves per-state discrete policies.

    States missing from a table fall back to the nearest populated state
    by Hamming distance over the decoded fields (ties break on the lower
    id).  Resolutions are cached; the fallback is logged once per state.
    """

    def __init__(self, env_cfg: EnvConfig, tables: dict[int, QTable]):
        if not tables:
            raise InputError("need at least one trained level")
        got = sorted(tables)
        if got != list(range(1, len(got) + 1)):
            raise InputError(f"levels must be 1..K, got {got}")
        for k, table in tables.items():
            if table.level != k:
                raise InputError("table level does not match its key")
            if not table.q:
                raise InputError(f"level {k} table is empty")
        self.env_cfg = env_cfg
        self.disc = Discretizer(env_cfg)
        self.tables = tables
        self._fallback: dict[tuple[int, int], int] = {}
        self._policy_cache: dict[tuple[int, int], Policy] = {}

    @property
    def max_level(self) -> int:
        return len(self.tables)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(range(self.max_level + 1))

    def _resolve(self, level: int, sid: int) -> int:
        table = self.tables[level]
        if sid in table.q:
            return sid
        key = (level, sid)
        cached = self._fallback.get(key)
        if cached is not None:
            return cached
        fields = self.disc.state_from_id(sid).fields()
        best_sid = -1
        best_dist = len(fields) + 1
        for candidate in sorted(table.q):
            cand_fields = self.disc.state_from_id(candidate).fields()
            dist = sum(a != b for a, b in zip(fields, cand_fields))
            if dist < best_dist:
                best_dist = dist
                best_sid = candidate
        logger.info(
            "state %d missing from level-%d table, using nearest state %d",
            sid,
            level,
            best_sid,
        )
        self._fallback[key] = best_sid
        return best_sid

    def policy(self, level: int, sid: int) -> Policy:
        if level == 0:
            return level0_policy(self.disc.state_from_id(sid))
        if level not in self.tables:
            raise InputError(f"no table for level {level}")
        key = (level, sid)
        cached = self._policy_cache.get(key)
        if cached is None:
            cached = self.tables[level].policy(self._resolve(level, sid))
            self._policy_cache[key] = cached
        return cached

    def discrete_policies(self, sid: int) -> list[Policy]:
        """Observation set for one state: policies at levels 0..K."""
        return [self.policy(k, sid) for k in self.levels]

    def sampler(self, level: int) -> Callable[[EnvState, np.random.Generator], int]:
        def draw(state: EnvState, rng: np.random.Generator) -> int:
            return _sample(self.policy(level, self.disc.state_id(state)), rng)

        return draw

    def common_states(self, min_visits: int = 1) -> list[int]:
        """States visited at least min_visits times at every trained level."""
        common: Optional[set[int]] = None
        for table in self.tables.values():
            seen = {s for s, n in table.visits.items() if n >= min_visits}
            common = seen if common is None else common & seen
        return sorted(common or [])

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "action_set": list(ACTIONS),
            "cardinalities": list(self.disc.cardinalities),
            "tables": {str(k): t.to_dict() for k, t in sorted(self.tables.items())},
        }

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict, env_cfg: EnvConfig) -> "PolicySet":
        if doc.get("version") != 1:
            raise SchemaError(f"unsupported q-table version {doc.get('version')!r}")
        expected = list(Discretizer(env_cfg).cardinalities)
        if doc.get("cardinalities") != expected:
            raise SchemaError(
                "q-tables were trained on a different discretization"
            )
        tables = {int(k): QTable.from_dict(t) for k, t in doc["tables"].items()}
        return cls(env_cfg, tables)

    @classmethod
    def load(cls, path: str | Path, env_cfg: EnvConfig) -> "PolicySet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), env_cfg)


def train_hierarchy(env_cfg: EnvConfig, rl_cfg: RLConfig, seed: int) -> PolicySet:
    """Train levels 1..max_level, each against the previous level."""
    tables: dict[int, QTable] = {}

    def rule_sampler(state: EnvState, rng: np.random.Generator) -> int:
        return _sample(level0_policy(state), rng)

    opponent = rule_sampler
    for level in range(1, rl_cfg.max_level + 1):
        logger.info("training level %d against level %d traffic", level, level - 1)
        tables[level] = train_level(level, opponent, env_cfg, rl_cfg, seed)
        partial = PolicySet(env_cfg, dict(tables))
        opponent = partial.sampler(level)
    return PolicySet(env_cfg, tables)


def evaluate_policy(
    policy_fn: Callable[[EnvState], int],
    env_cfg: EnvConfig,
    opponent: Callable[[EnvState, np.random.Generator], int],
    episodes: int,
    seed: int,
) -> float:
    """Mean per-step ego reward under a deterministic ego policy."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9999]))
    env = HighwayEnv(env_cfg, rng)
    total = 0.0
    steps = 0
    for _ in range(episodes):
        env.reset()
        states = env.states()
        for _ in range(env_cfg.episode_steps):
            actions = [policy_fn(states[0])]
            for other in range(1, env_cfg.n_vehicles):
                actions.append(opponent(states[other], rng))
            result = env.step(actions)
            total += float(result.rewards[0])
            steps += 1
            states = env.states()
    return total / steps
