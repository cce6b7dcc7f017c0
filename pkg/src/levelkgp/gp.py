"""Per-state multi-output GP over the continuous reasoning level.

Training data are the discrete-level policies of one state: inputs are
the integer levels, outputs the action probabilities.  A probability
vector is determined by its deviation from uniform inside the zero-sum
hyperplane, so the GP models the coordinates of (policy - uniform) in
an orthonormal basis of that hyperplane.  Predictive means therefore
sum to one exactly at every level, and the modeled process has zero
prior mean.  The observed vectors are treated as noise-free up to the
stabilizing jitter.

Hyperparameters (per-entry variance, coregionalization weights, kappa)
are chosen by maximizing the log marginal likelihood with L-BFGS-B from
several restarts, using the analytic gradient.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .config import (
    GPConfig,
    KernelEntryConfig,
    OptimizerConfig,
    default_bank_entries,
    resolve_rank,
)
from .errors import (
    DegeneratePolicyError,
    InputError,
    MissingStateError,
    NumericalError,
)
from .kernels import KernelBank, build_bank, jittered_cholesky, lmc_covariance

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class Policy:
    """Immutable probability vector over actions.

    Entries lie in [0, 1] and sum to one within 1e-9; violations raise
    InputError.
    """

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise InputError("policy must be a vector with at least two entries")
        if not np.all(np.isfinite(p)):
            raise InputError("policy entries must be finite")
        if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9):
            raise InputError("policy entries must lie in [0, 1]")
        total = float(p.sum())
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"policy must sum to 1, got {total!r}")
        p = np.clip(p, 0.0, 1.0)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __setattr__(self, name, value):
        raise AttributeError("Policy is immutable")

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Policy) and np.array_equal(self.probs, other.probs)

    def __repr__(self) -> str:
        return f"Policy({np.array2string(self.probs, precision=4)})"


def shift_normalize(raw, on_degenerate: str = "uniform") -> Policy:
    """Map a real vector to a policy: shift up by the minimum if any
    entry is negative, then divide by the sum.

    A vector whose shifted sum is (numerically) zero carries no
    preference information; by default it becomes the uniform policy
    with a warning, or raises DegeneratePolicyError when
    on_degenerate="raise".
    """
    v = np.asarray(raw, dtype=float).ravel()
    if v.size < 2:
        raise InputError("need at least two entries to normalize")
    if not np.all(np.isfinite(v)):
        raise InputError("cannot normalize non-finite values")
    lowest = v.min()
    shifted = v - lowest if lowest < 0 else v.copy()
    total = shifted.sum()
    if total <= 1e-300:
        if on_degenerate == "raise":
            raise DegeneratePolicyError("vector collapsed to zero after shifting")
        logger.warning("degenerate vector in shift_normalize, using uniform")
        return Policy(np.full(v.size, 1.0 / v.size))
    return Policy(shifted / total)


def zero_sum_basis(dim: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum hyperplane, shape (dim, dim-1).

    Column j has j+1 leading entries 1 and then -(j+1), scaled to unit
    norm.  Columns are mutually orthogonal and orthogonal to the ones
    vector, so V^T V = I and 1^T V = 0.
    """
    if dim < 2:
        raise InputError("basis needs dim >= 2")
    basis = np.zeros((dim, dim - 1))
    for j in range(1, dim):
        basis[:j, j - 1] = 1.0
        basis[j, j - 1] = -float(j)
        basis[:, j - 1] /= math.sqrt(j * (j + 1))
    return basis


def gaussian_log_marginal(chol: np.ndarray, target: np.ndarray) -> float:
    """Zero-mean Gaussian log density of target given a lower Cholesky
    factor of its covariance."""
    f = np.asarray(target, dtype=float).ravel()
    alpha = cho_solve((chol, True), f)
    return float(
        -0.5 * f @ alpha - np.log(np.diag(chol)).sum() - 0.5 * f.size * LOG_2PI
    )


# --- parameter vector layout -------------------------------------------------
#
# Per bank entry z with rank R_z: [log_variance, W.ravel() (D*R_z), raw_kappa (D)]
# kappa = softplus(raw_kappa) keeps the diagonal non-negative.


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _layout(entries: Sequence[KernelEntryConfig], dim: int):
    slots = []
    offset = 0
    for cfg in entries:
        rank = resolve_rank(cfg.rank, dim)
        size = 1 + dim * rank + dim
        slots.append((cfg, rank, offset, size))
        offset += size
    return slots, offset


def _unpack(theta: np.ndarray, slots, dim: int):
    parts = []
    for _cfg, rank, offset, size in slots:
        chunk = theta[offset : offset + size]
        log_var = chunk[0]
        w = chunk[1 : 1 + dim * rank].reshape(dim, rank)
        raw_kappa = chunk[1 + dim * rank :]
        parts.append((float(log_var), w, raw_kappa))
    return parts


def _grams(entries, levels):
    """Unit-variance gram matrices; fixed across optimizer iterations."""
    x = np.asarray(levels, dtype=float).ravel()
    mats = []
    for cfg in entries:
        if cfg.kind == "bias":
            mats.append(np.ones((x.size, x.size)))
        else:
            s = math.sqrt(3.0) * np.abs(x[:, None] - x[None, :]) / cfg.length_scale
            mats.append((1.0 + s) * np.exp(-s))
    return mats


def _neg_lml_and_grad(theta, slots, grams, target, dim, jitter):
    n = grams[0].shape[0]
    m = dim * n
    parts = _unpack(theta, slots, dim)
    sigma = jitter * np.eye(m)
    coreg = []
    for (log_var, w, raw_kappa), gram in zip(parts, grams):
        var = math.exp(log_var)
        b = w @ w.T + np.diag(_softplus(raw_kappa))
        coreg.append((var, w, raw_kappa, b))
        sigma += var * np.kron(b, gram)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros_like(theta)
    alpha = cho_solve((chol, True), target)
    lml = (
        -0.5 * target @ alpha
        - np.log(np.diag(chol)).sum()
        - 0.5 * m * LOG_2PI
    )
    sigma_inv = cho_solve((chol, True), np.eye(m))
    # dLML/dtheta = 0.5 tr((alpha alpha^T - Sigma^-1) dSigma/dtheta)
    gbar = np.outer(alpha, alpha) - sigma_inv
    g4 = gbar.reshape(dim, n, dim, n)
    grad = np.zeros_like(theta)
    for (_cfg, rank, offset, size), (var, w, raw_kappa, b), gram in zip(
        slots, coreg, grams
    ):
        scaled = var * gram
        mb = 0.5 * np.einsum("aibj,ij->ab", g4, scaled)
        grad[offset] = float(np.sum(mb * b))
        grad[offset + 1 : offset + 1 + dim * rank] = ((mb + mb.T) @ w).ravel()
        grad[offset + 1 + dim * rank : offset + size] = np.diag(mb) * _sigmoid(
            raw_kappa
        )
    return -lml, -grad


def _initial_theta(slots, dim, rng, perturb: bool):
    pieces = []
    for cfg, rank, _offset, _size in slots:
        log_var = 0.0
        w = 0.1 * rng.standard_normal((dim, rank))
        raw_kappa = np.full(dim, _softplus_inv(0.1))
        if perturb:
            log_var += rng.normal(scale=1.0)
            raw_kappa += rng.normal(scale=0.5, size=dim)
        pieces.append(np.concatenate(([log_var], w.ravel(), raw_kappa)))
    return np.concatenate(pieces)


def _bounds(slots, dim, opt: OptimizerConfig):
    bounds = []
    for _cfg, rank, _offset, _size in slots:
        bounds.append(opt.log_variance_bounds)
        bounds += [(-opt.weight_bound, opt.weight_bound)] * (dim * rank)
        bounds += [opt.raw_kappa_bounds] * dim
    return bounds


def _bank_from_theta(theta, slots, dim) -> KernelBank:
    entries = [cfg for cfg, _r, _o, _s in slots]
    variances, weight_list, kappa_list = [], [], []
    for log_var, w, raw_kappa in _unpack(theta, slots, dim):
        variances.append(math.exp(log_var))
        weight_list.append(w)
        kappa_list.append(_softplus(raw_kappa))
    return build_bank(entries, dim, variances, weight_list, kappa_list)


def _validate_training_set(levels, policies):
    x = np.asarray(levels, dtype=float).ravel()
    rows = [p.probs if isinstance(p, Policy) else np.asarray(p, float) for p in policies]
    y = np.vstack(rows)
    if x.size != y.shape[0]:
        raise InputError("one policy per training level required")
    if x.size < 2:
        raise InputError("need at least two training levels")
    if len(np.unique(x)) != x.size:
        raise InputError("training levels must be distinct")
    if not np.all(np.isfinite(x)):
        raise InputError("training levels must be finite")
    if y.shape[1] < 2:
        raise InputError("policies need at least two actions")
    if not np.all(np.isfinite(y)):
        raise InputError("policies must be finite")
    if np.any(y < -1e-9) or np.abs(y.sum(axis=1) - 1.0).max() > 1e-6:
        raise InputError("training rows must be probability vectors")
    return x, y


@dataclass
class PolicyPrediction:
    """Posterior at one level: raw mean, covariance and the normalized
    policy.  The raw mean sums to one by construction; entries may be
    slightly negative between training levels."""

    level: float
    mean: np.ndarray
    cov: np.ndarray

    @property
    def policy(self) -> Policy:
        return shift_normalize(self.mean)


class StateGP:
    """Fitted per-state model; exposes posterior queries over levels.

    Instances are immutable after construction and safe to share across
    threads: prediction only reads the stored factorization.
    """

    def __init__(
        self,
        levels: np.ndarray,
        policies: np.ndarray,
        bank: KernelBank,
        jitter_used: float,
        state_id: Optional[int] = None,
        lml: Optional[float] = None,
    ):
        self.levels = np.asarray(levels, dtype=float).ravel()
        self.policies = np.asarray(policies, dtype=float)
        self.bank = bank
        self.state_id = state_id
        self.action_count = self.policies.shape[1]
        self.basis = zero_sum_basis(self.action_count)
        self.prior_mean = np.full(self.action_count, 1.0 / self.action_count)
        # residual coordinates, output-major flattening
        resid = (self.policies - self.prior_mean) @ self.basis
        self._target = resid.T.ravel()
        sigma = lmc_covariance(self.levels, self.levels, bank)
        self.chol, self.jitter_used = jittered_cholesky(
            sigma, jitter_used, max(jitter_used, 1e-2)
        )
        self._alpha = cho_solve((self.chol, True), self._target)
        self.lml = (
            lml if lml is not None else gaussian_log_marginal(self.chol, self._target)
        )

    # -- queries --------------------------------------------------------

    def _cross(self, query: np.ndarray) -> np.ndarray:
        return lmc_covariance(query, self.levels, self.bank)

    def predict_mean(self, levels) -> np.ndarray:
        """Raw posterior means, one row per query level, shape (m, A)."""
        q = np.atleast_1d(np.asarray(levels, dtype=float)).ravel()
        if not np.all(np.isfinite(q)):
            raise InputError("query levels must be finite")
        star = self._cross(q)
        dim = self.action_count - 1
        coords = (star @ self._alpha).reshape(dim, q.size).T
        return self.prior_mean[None, :] + coords @ self.basis.T

    def predict(self, level: float) -> PolicyPrediction:
        """Posterior mean and covariance of the action probabilities."""
        q = float(level)
        if not math.isfinite(q):
            raise InputError("query level must be finite")
        star = self._cross(np.array([q]))
        dim = self.action_count - 1
        coords = star @ self._alpha
        mean = self.prior_mean + self.basis @ coords
        prior = lmc_covariance(np.array([q]), np.array([q]), self.bank)
        solved = cho_solve((self.chol, True), star.T)
        cov_coords = prior - star @ solved
        cov = self.basis @ cov_coords @ self.basis.T
        cov = 0.5 * (cov + cov.T)
        return PolicyPrediction(level=q, mean=mean, cov=cov)

    def policy_at(self, level: float) -> Policy:
        return shift_normalize(self.predict_mean([level])[0])

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "state_id": self.state_id,
            "levels": self.levels.tolist(),
            "policies": self.policies.tolist(),
            "bank": self.bank.to_dict(),
            "jitter_used": self.jitter_used,
            "lml": self.lml,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StateGP":
        if doc.get("version") != 1:
            raise InputError(f"unsupported model version {doc.get('version')!r}")
        return cls(
            levels=np.asarray(doc["levels"], dtype=float),
            policies=np.asarray(doc["policies"], dtype=float),
            bank=KernelBank.from_dict(doc["bank"]),
            jitter_used=float(doc["jitter_used"]),
            state_id=doc["state_id"],
            lml=float(doc["lml"]),
        )

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "StateGP":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def log_marginal_likelihood(levels, policies, bank: KernelBank, jitter: float = 1e-6) -> float:
    """LML of the residual coordinates under the given bank."""
    x, y = _validate_training_set(levels, policies)
    resid = (y - 1.0 / y.shape[1]) @ zero_sum_basis(y.shape[1])
    target = resid.T.ravel()
    sigma = lmc_covariance(x, x, bank)
    chol, _ = jittered_cholesky(sigma, jitter, max(jitter, 1e-2))
    return gaussian_log_marginal(chol, target)


def fit_state_gp(
    levels,
    policies,
    bank_entries: Optional[Sequence[KernelEntryConfig]] = None,
    optimizer: Optional[OptimizerConfig] = None,
    gp_config: Optional[GPConfig] = None,
    state_id: Optional[int] = None,
) -> StateGP:
    """Fit bank hyperparameters to one state's discrete-level policies.

    Runs L-BFGS-B from ``optimizer.restarts`` starts (the first start is
    a fixed default initialization, later ones are perturbed) and keeps
    the solution with the highest marginal likelihood.  Deterministic
    given (data, configs, state_id).
    """
    entries = tuple(bank_entries) if bank_entries is not None else default_bank_entries()
    opt = optimizer or OptimizerConfig()
    gpc = gp_config or GPConfig()
    x, y = _validate_training_set(levels, policies)
    action_count = y.shape[1]
    dim = action_count - 1
    resid = (y - 1.0 / action_count) @ zero_sum_basis(action_count)
    target = resid.T.ravel()

    slots, _n_params = _layout(entries, dim)
    grams = _grams(entries, x)
    bounds = _bounds(slots, dim, opt)
    seed_key = state_id if state_id is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence([opt.seed, seed_key]))

    best_theta = None
    best_nll = np.inf
    for restart in range(opt.restarts):
        theta0 = _initial_theta(slots, dim, rng, perturb=restart > 0)
        result = minimize(
            _neg_lml_and_grad,
            theta0,
            args=(slots, grams, target, dim, gpc.jitter),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opt.max_iter},
        )
        if result.fun < best_nll:
            best_nll = result.fun
            best_theta = result.x
    if best_theta is None:
        raise NumericalError("all optimizer restarts failed")
    bank = _bank_from_theta(best_theta, slots, dim)
    return StateGP(
        levels=x,
        policies=y,
        bank=bank,
        jitter_used=gpc.jitter,
        state_id=state_id,
        lml=-best_nll,
    )


class ModelCache:
    """Thread-safe store of fitted per-state models.

    ``get_or_fit`` serializes concurrent fits of the same state behind a
    per-state lock so each model is built once; distinct states fit in
    parallel.
    """

    def __init__(self):
        self._models: dict[int, StateGP] = {}
        self._guard = threading.Lock()
        self._state_locks: dict[int, threading.Lock] = {}

    def put(self, model: StateGP):
        if model.state_id is None:
            raise InputError("cached models need a state_id")
        with self._guard:
            self._models[model.state_id] = model

    def get(self, state_id: int) -> StateGP:
        with self._guard:
            try:
                return self._models[state_id]
            except KeyError:
                raise MissingStateError(state_id) from None

    def __contains__(self, state_id: int) -> bool:
        with self._guard:
            return state_id in self._models

    def __len__(self) -> int:
        with self._guard:
            return len(self._models)

    def state_ids(self) -> list[int]:
        with self._guard:
            return sorted(self._models)

    def get_or_fit(self, state_id: int, builder: Callable[[], StateGP]) -> StateGP:
        with self._guard:
            model = self._models.get(state_id)
            if model is not None:
                return model
            lock = self._state_locks.setdefault(state_id, threading.Lock())
        with lock:
            with self._guard:
                model = self._models.get(state_id)
                if model is not None:
                    return model
            model = builder()
            if model.state_id != state_id:
                raise InputError("builder returned a model for a different state")
            with self._guard:
                self._models[state_id] = model
            return model

    def save_dir(self, path: str | Path):
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for state_id in self.state_ids():
            self.get(state_id).save(root / f"state_{state_id}.json")

    @classmethod
    def load_dir(cls, path: str | Path) -> "ModelCache":
        root = Path(path)
        if not root.is_dir():
            raise InputError(f"model directory {root} does not exist")
        cache = cls()
        files = sorted(root.glob("state_*.json"))
        if not files:
            raise InputError(f"model directory {root} contains no models")
        for file in files:
            cache.put(StateGP.load(file))
        return cache
