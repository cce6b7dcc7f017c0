"""Best response in the level hierarchy game.

Levels 0..K form the strategy universe.  A pure level k earns 1 against
a pure level j exactly when k = j + 1, else 0, so the expected payoff
of responding with level k to a mixture c over opponent levels is the
single coefficient c[k-1].  The best-response set against c is therefore
the set {j+1 : c[j] is maximal over j = 0..K-1}, achieved value
max_j c[j], and any mixture supported on that set attains it.  The
closed form requires the opponent to put no mass on the top level K,
since level K+1 is outside the universe.

``brute_force_best_response`` checks the closed form by scanning a
simplex grid of responder mixtures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError
from .gp import Policy

TIE_TOL = 1e-12


class MixedStrategy:
    """Probability vector over the level universe 0..K."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        c = np.asarray(coeffs, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise InputError("mixed strategy needs at least two levels")
        if not np.all(np.isfinite(c)):
            raise InputError("coefficients must be finite")
        if np.any(c < -TIE_TOL):
            raise InputError("coefficients must be non-negative")
        if abs(float(c.sum()) - 1.0) > 1e-9:
            raise InputError(f"coefficients must sum to 1, got {c.sum()!r}")
        c = np.clip(c, 0.0, None)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __setattr__(self, name, value):
        raise AttributeError("MixedStrategy is immutable")

    @property
    def n_levels(self) -> int:
        return self.coeffs.size

    @property
    def max_level(self) -> int:
        return self.coeffs.size - 1

    def support(self, tol: float = TIE_TOL) -> tuple[int, ...]:
        return tuple(int(i) for i in np.nonzero(self.coeffs > tol)[0])

    @classmethod
    def pure(cls, level: int, n_levels: int) -> "MixedStrategy":
        if not 0 <= level < n_levels:
            raise InputError(f"level {level} outside universe of {n_levels}")
        c = np.zeros(n_levels)
        c[level] = 1.0
        return cls(c)

    @classmethod
    def uniform_over(cls, levels: Sequence[int], n_levels: int) -> "MixedStrategy":
        if not levels:
            raise InputError("need at least one level")
        c = np.zeros(n_levels)
        for lv in levels:
            if not 0 <= lv < n_levels:
                raise InputError(f"level {lv} outside universe of {n_levels}")
            c[lv] += 1.0 / len(levels)
        return cls(c)

    def __repr__(self) -> str:
        return f"MixedStrategy({np.array2string(self.coeffs, precision=4)})"


def pure_utility(responder_level: int, opponent_level: int) -> float:
    """1 when the responder reasons exactly one step deeper, else 0."""
    if responder_level < 0 or opponent_level < 0:
        raise InputError("levels must be non-negative")
    return 1.0 if responder_level == opponent_level + 1 else 0.0


def mixed_utility(responder: MixedStrategy, opponent: MixedStrategy) -> float:
    """Expected payoff sum_j responder[j+1] * opponent[j]."""
    if responder.n_levels != opponent.n_levels:
        raise InputError("strategies must share the level universe")
    a = responder.coeffs
    b = opponent.coeffs
    return float(np.dot(a[1:], b[:-1]))


@dataclass(frozen=True)
class BestResponseResult:
    """Closed-form responder summary against one opponent mixture."""

    levels: tuple[int, ...]
    strategy: MixedStrategy
    value: float


def best_response_set(
    opponent: MixedStrategy, tie_tol: float = TIE_TOL
) -> BestResponseResult:
    """Best-response levels, a uniform mixture over them, and the value.

    The opponent may not play the top level of the universe; responding
    one step above it would leave the universe.
    """
    c = opponent.coeffs
    if c[-1] > tie_tol:
        raise InputError(
            "opponent plays the top level; no best response inside the universe"
        )
    body = c[:-1]
    value = float(body.max())
    levels = tuple(int(j) + 1 for j in np.nonzero(body >= value - tie_tol)[0])
    strategy = MixedStrategy.uniform_over(levels, opponent.n_levels)
    return BestResponseResult(levels=levels, strategy=strategy, value=value)


def simplex_grid(units: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All compositions of `units` into `parts` non-negative integers."""
    if parts < 1:
        raise InputError("parts must be positive")
    if parts == 1:
        yield (units,)
        return
    for first in range(units + 1):
        for rest in simplex_grid(units - first, parts - 1):
            yield (first,) + rest


def brute_force_best_response(
    opponent: MixedStrategy,
    grid_step: float = 0.05,
    tie_tol: float = TIE_TOL,
) -> tuple[float, list[MixedStrategy]]:
    """Grid search over responder mixtures on levels 1..K.

    Returns the best utility found and every grid mixture achieving it
    within tie_tol.  The grid contains all pure strategies, so the
    maximum matches the true value exactly.
    """
    if not 0 < grid_step <= 1:
        raise InputError("grid_step must lie in (0, 1]")
    units = round(1.0 / grid_step)
    if abs(units * grid_step - 1.0) > 1e-9:
        raise InputError("grid_step must divide 1")
    n = opponent.n_levels
    best_value = -np.inf
    argmax: list[MixedStrategy] = []
    for combo in simplex_grid(units, n - 1):
        coeffs = np.zeros(n)
        coeffs[1:] = np.asarray(combo, dtype=float) / units
        candidate = MixedStrategy(coeffs)
        value = mixed_utility(candidate, opponent)
        if value > best_value + tie_tol:
            best_value = value
            argmax = [candidate]
        elif value >= best_value - tie_tol:
            argmax.append(candidate)
    return best_value, argmax


def mixed_policy(weights: Sequence[float], policies: Sequence[Policy]) -> Policy:
    """Convex combination of policies under the given weights."""
    if len(weights) != len(policies):
        raise InputError("one weight per policy required")
    w = np.asarray(weights, dtype=float)
    if np.any(w < -TIE_TOL) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise InputError("weights must be a probability vector")
    sizes = {len(p) for p in policies}
    if len(sizes) != 1:
        raise InputError("policies must share an action count")
    stacked = np.vstack([p.probs for p in policies])
    return Policy(np.clip(w, 0.0, None) @ stacked)
