"""Covariance functions for the level-indexed multi-output GP.

The multi-output covariance is a linear model of coregionalization

    Sigma(X, X') = sum_z B_z (x) k_z(X, X')

where (x) is the Kronecker product, each k_z is a scalar kernel on the
reasoning-level axis and each B_z = W_z W_z^T + diag(kappa_z) couples
the outputs.  Blocks are laid out output-major: row index d*N + i
refers to output d at input i.

The bank is fixed in shape (one bias entry plus Matern-3/2 entries on a
length-scale grid); only variances and coregionalization weights are
learned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import KernelEntryConfig, default_bank_entries, resolve_rank
from .errors import ConfigurationError, NumericalError, ParameterError

SQRT3 = math.sqrt(3.0)


def matern32(distance, variance: float, length_scale: float):
    """Matern-3/2 on a distance: v*(1 + sqrt(3)d/l)*exp(-sqrt(3)d/l)."""
    if variance <= 0:
        raise ParameterError(f"variance must be positive, got {variance}")
    if length_scale <= 0:
        raise ParameterError(f"length_scale must be positive, got {length_scale}")
    d = np.abs(np.asarray(distance, dtype=float))
    s = SQRT3 * d / length_scale
    return variance * (1.0 + s) * np.exp(-s)


@dataclass(frozen=True)
class Matern32Kernel:
    """Stationary scalar kernel with fixed length scale."""

    variance: float
    length_scale: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ParameterError(f"variance must be positive, got {self.variance}")
        if self.length_scale <= 0:
            raise ParameterError(
                f"length_scale must be positive, got {self.length_scale}"
            )

    def gram(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        return matern32(x[:, None] - y[None, :], self.variance, self.length_scale)


@dataclass(frozen=True)
class BiasKernel:
    """Constant kernel k(x, x') = variance."""

    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ParameterError(f"variance must be positive, got {self.variance}")

    def gram(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        return np.full((x.size, y.size), self.variance)


@dataclass(frozen=True)
class CoregionalizationMatrix:
    """B = W W^T + diag(kappa) with kappa >= 0, hence symmetric PSD."""

    weights: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        k = np.asarray(self.kappa, dtype=float).ravel()
        if w.shape[0] != k.size:
            raise ParameterError(
                f"weights rows ({w.shape[0]}) must match kappa size ({k.size})"
            )
        if np.any(k < 0):
            raise ParameterError("kappa entries must be non-negative")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(k))):
            raise ParameterError("coregionalization parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kappa", k)

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.weights @ self.weights.T + np.diag(self.kappa)


@dataclass(frozen=True)
class KernelBank:
    """Paired scalar kernels and coregionalization matrices."""

    kernels: tuple
    coregs: tuple[CoregionalizationMatrix, ...]

    def __post_init__(self):
        if len(self.kernels) != len(self.coregs):
            raise ConfigurationError("one coregionalization matrix per kernel")
        if not self.kernels:
            raise ConfigurationError("bank must contain at least one entry")
        dims = {c.output_dim for c in self.coregs}
        if len(dims) != 1:
            raise ConfigurationError(f"inconsistent output dims in bank: {dims}")

    @property
    def size(self) -> int:
        return len(self.kernels)

    @property
    def output_dim(self) -> int:
        return self.coregs[0].output_dim

    def to_dict(self) -> dict:
        entries = []
        for kern, coreg in zip(self.kernels, self.coregs):
            if isinstance(kern, BiasKernel):
                spec = {"kind": "bias", "variance": kern.variance}
            else:
                spec = {
                    "kind": "matern32",
                    "variance": kern.variance,
                    "length_scale": kern.length_scale,
                }
            spec["weights"] = coreg.weights.tolist()
            spec["kappa"] = coreg.kappa.tolist()
            entries.append(spec)
        return {"entries": entries}

    @classmethod
    def from_dict(cls, doc: dict) -> "KernelBank":
        kernels = []
        coregs = []
        for spec in doc["entries"]:
            if spec["kind"] == "bias":
                kernels.append(BiasKernel(variance=spec["variance"]))
            elif spec["kind"] == "matern32":
                kernels.append(
                    Matern32Kernel(
                        variance=spec["variance"],
                        length_scale=spec["length_scale"],
                    )
                )
            else:
                raise ConfigurationError(f"unknown kernel kind {spec['kind']!r}")
            coregs.append(
                CoregionalizationMatrix(
                    weights=np.asarray(spec["weights"], dtype=float),
                    kappa=np.asarray(spec["kappa"], dtype=float),
                )
            )
        return cls(kernels=tuple(kernels), coregs=tuple(coregs))


def build_bank(
    entries: Sequence[KernelEntryConfig],
    output_dim: int,
    variances: Sequence[float],
    weight_list: Sequence[np.ndarray],
    kappa_list: Sequence[np.ndarray],
) -> KernelBank:
    """Assemble a bank from entry configs and concrete parameter values."""
    if not (len(entries) == len(variances) == len(weight_list) == len(kappa_list)):
        raise ConfigurationError("bank parameter lists must have equal length")
    kernels = []
    coregs = []
    for cfg, var, w, kap in zip(entries, variances, weight_list, kappa_list):
        if cfg.kind == "bias":
            kernels.append(BiasKernel(variance=float(var)))
        else:
            kernels.append(
                Matern32Kernel(variance=float(var), length_scale=cfg.length_scale)
            )
        coregs.append(CoregionalizationMatrix(weights=w, kappa=kap))
    return KernelBank(kernels=tuple(kernels), coregs=tuple(coregs))


def default_bank(output_dim: int, rng: Optional[np.random.Generator] = None) -> KernelBank:
    """Unit-variance bank with small random coregionalization weights."""
    rng = rng or np.random.default_rng(0)
    entries = default_bank_entries()
    variances = [1.0] * len(entries)
    weight_list = []
    kappa_list = []
    for cfg in entries:
        r = resolve_rank(cfg.rank, output_dim)
        weight_list.append(0.1 * rng.standard_normal((output_dim, r)))
        kappa_list.append(np.full(output_dim, 0.1))
    return build_bank(entries, output_dim, variances, weight_list, kappa_list)


def lmc_covariance(x: np.ndarray, y: np.ndarray, bank: KernelBank) -> np.ndarray:
    """Full cross-covariance sum_z kron(B_z, k_z(x, y)), output-major."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    total = np.zeros((bank.output_dim * x.size, bank.output_dim * y.size))
    for kern, coreg in zip(bank.kernels, bank.coregs):
        total += np.kron(coreg.matrix, kern.gram(x, y))
    return total


def jittered_cholesky(
    matrix: np.ndarray, jitter: float = 1e-6, max_jitter: float = 1e-2
) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of matrix + jitter*I, escalating jitter by 10x.

    Returns the factor and the jitter that succeeded.  Raises
    NumericalError once the jitter would exceed max_jitter.
    """
    if not 0 < jitter <= max_jitter:
        raise ParameterError("require 0 < jitter <= max_jitter")
    m = np.asarray(matrix, dtype=float)
    eye = np.eye(m.shape[0])
    level = jitter
    while level <= max_jitter * (1 + 1e-12):
        try:
            return np.linalg.cholesky(m + level * eye), level
        except np.linalg.LinAlgError:
            level *= 10.0
    raise NumericalError(
        f"covariance not positive definite up to jitter {max_jitter}"
    )
