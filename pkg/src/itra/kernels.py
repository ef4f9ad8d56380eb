"""Gaussian kernels, the median bandwidth heuristic and the MMD estimator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

EPS_SQRT = 1e-12
MEDIAN_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Bandwidth policy for the Gaussian kernel.

    ``mode="single"`` uses the fixed bandwidth ``sigma``. ``mode="median_mixture"``
    averages one kernel per entry of ``multipliers``, each with bandwidth
    ``multiplier * sigma_med`` where ``sigma_med`` is recomputed from the data.
    """

    mode: str = "median_mixture"
    sigma: float | None = None
    multipliers: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        if self.mode == "single":
            if self.sigma is None or not self.sigma > 0:
                raise ContractError(f"single kernel needs sigma > 0, got {self.sigma}")
        elif self.mode == "median_mixture":
            mult = self.multipliers
            if not mult or any(m <= 0 for m in mult):
                raise ContractError(f"multipliers must be positive, got {mult}")
            if any(b <= a for a, b in zip(mult, mult[1:])):
                raise ContractError(f"multipliers must be strictly increasing, got {mult}")
        else:
            raise ContractError(f"unknown kernel mode {self.mode!r}")

    @classmethod
    def single(cls, sigma: float) -> "KernelSpec":
        return cls(mode="single", sigma=float(sigma))

    @classmethod
    def median_mixture(cls, count: int = 5, multipliers=None) -> "KernelSpec":
        if multipliers is None:
            multipliers = tuple(2.0 ** i for i in range(count))
        if len(multipliers) != count:
            raise ContractError(f"expected {count} multipliers, got {len(multipliers)}")
        return cls(mode="median_mixture", multipliers=tuple(multipliers))

    @property
    def count(self) -> int:
        return 1 if self.mode == "single" else len(self.multipliers)

    def to_dict(self) -> dict:
        if self.mode == "single":
            return {"mode": "single", "sigma": self.sigma}
        return {"mode": self.mode, "multipliers": list(self.multipliers)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        d = dict(d)
        if "multipliers" in d:
            d["multipliers"] = tuple(d["multipliers"])
        return cls(**d)


def _features(x, name: str) -> Tensor:
    t = ag.tensor(x)
    if t.ndim != 2:
        raise DimensionError(f"{name} must be a matrix [n, d], got shape {t.shape}")
    if t.shape[0] < 1:
        raise DegenerateInputError(f"{name} is empty")
    return t


def pairwise_sq_dists(X, Y) -> Tensor:
    """Squared Euclidean distances ``D[i, j] = ||X[i] - Y[j]||^2``.

    Entries are computed coordinate-wise, so ``D(X, Y)`` is bit-for-bit the
    transpose of ``D(Y, X)``.
    """
    X, Y = _features(X, "X"), _features(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"feature dims differ: {X.shape} vs {Y.shape}")
    D = cdist(X.data, Y.data, "sqeuclidean")

    def bw(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * X.data - g @ Y.data)
        gy = 2.0 * (g.sum(axis=0)[:, None] * Y.data - g.T @ X.data)
        return gx, gy

    return Tensor._result(D, (X, Y), bw)


def median_bandwidth(X, Y) -> float:
    """Median squared pairwise distance over the pooled set, self-pairs excluded."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    Y = np.asarray(Y.data if isinstance(Y, Tensor) else Y, dtype=np.float64)
    pooled = np.vstack([X, Y])
    if pooled.shape[0] < 2:
        raise DegenerateInputError("median bandwidth needs at least 2 pooled points")
    if not np.isfinite(pooled).all():
        raise NumericalError("non-finite features reached the median bandwidth")
    return max(float(np.median(pdist(pooled, "sqeuclidean"))), MEDIAN_FLOOR)


def _bandwidths(spec: KernelSpec, sigma_med: float | None) -> list[float]:
    if spec.mode == "single":
        return [spec.sigma]
    if sigma_med is None or not sigma_med > 0:
        raise ContractError(f"mixture kernel needs sigma_med > 0, got {sigma_med}")
    return [m * sigma_med for m in spec.multipliers]


def kernel_matrix(D, spec: KernelSpec, sigma_med: float | None = None) -> Tensor:
    """Gaussian kernel values ``exp(-D / sigma)`` (averaged over a mixture)."""
    D = ag.tensor(D)
    bws = _bandwidths(spec, sigma_med)
    total = None
    for bw in bws:
        k = ag.exp(ag.scale(D, -1.0 / bw))
        total = k if total is None else total + k
    return total if len(bws) == 1 else ag.scale(total, 1.0 / len(bws))


def mmd_squared(H1, H2, spec: KernelSpec) -> Tensor:
    """The bracketed V-statistic (diagonal terms included), clamped at zero."""
    H1, H2 = _features(H1, "H1"), _features(H2, "H2")
    if H1.shape[1] != H2.shape[1]:
        raise DimensionError(f"feature dims differ: {H1.shape} vs {H2.shape}")
    m, n = H1.shape[0], H2.shape[0]
    sigma_med = median_bandwidth(H1.data, H2.data) if spec.mode != "single" else None

    k11 = kernel_matrix(pairwise_sq_dists(H1, H1), spec, sigma_med).sum()
    k22 = kernel_matrix(pairwise_sq_dists(H2, H2), spec, sigma_med).sum()
    k12 = kernel_matrix(pairwise_sq_dists(H1, H2), spec, sigma_med)
    # both summation orders, so swapping the arguments gives the same bits
    cross = k12.sum() + ag.transpose(k12).sum()
    bracket = (ag.scale(k11, 1.0 / (m * m)) + ag.scale(k22, 1.0 / (n * n))
               - ag.scale(cross, 1.0 / (m * n)))
    return ag.clamp_min(bracket, 0.0)


def mmd(H1, H2, spec: KernelSpec | None = None, eps: float = EPS_SQRT) -> Tensor:
    """Differentiable MMD estimate ``sqrt(bracket + eps)``."""
    spec = KernelSpec() if spec is None else spec
    return ag.sqrt(mmd_squared(H1, H2, spec) + eps)


def mmd_grad_closed_form(i: int, H1, H2, sigma: float, M: float) -> np.ndarray:
    """Analytic gradient of the single-kernel MMD w.r.t. row ``i`` of ``H1``.

    ``M`` is the squared estimate (the bracket), so the prefactor is
    ``1 / sqrt(M)``. Cross-batch terms carry ``1 / (m1 * m2)``.
    """
    if not M > 0:
        raise ContractError(f"closed-form gradient needs M > 0, got {M}")
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    H1 = np.asarray(H1, dtype=np.float64)
    H2 = np.asarray(H2, dtype=np.float64)
    m1, m2 = len(H1), len(H2)
    hi = H1[i]
    d1 = hi - H1
    d2 = hi - H2
    e1 = np.exp(-np.sum(d1 * d1, axis=1) / sigma)
    e2 = np.exp(-np.sum(d2 * d2, axis=1) / sigma)
    self_term = (e1[:, None] * d1).sum(axis=0) / (sigma * m1 * m1)
    cross_term = (e2[:, None] * d2).sum(axis=0) / (sigma * m1 * m2)
    return -2.0 / np.sqrt(M) * (self_term - cross_term)


def adaptive_weights(h, H2, sigma: float) -> np.ndarray:
    """Normalised kernel similarities of ``h`` to each row of ``H2``."""
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    H2 = np.atleast_2d(np.asarray(H2, dtype=np.float64))
    if H2.shape[0] < 1:
        raise DegenerateInputError("H2 is empty")
    diff = np.asarray(h, dtype=np.float64) - H2
    logits = -np.sum(diff * diff, axis=1) / sigma
    w = np.exp(logits - logits.max())
    return w / w.sum()
