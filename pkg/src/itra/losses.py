"""Supervision and regularisation objectives.

Cross-entropy, label smoothing and center loss are the comparison methods;
``match_loss`` and ``match_loss_classcond`` are the feature-alignment terms
added on top of cross-entropy by the ``itra`` and ``itra_c`` methods.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError
from .kernels import KernelSpec, mmd

METHODS = ("baseline", "lsr", "center", "itra", "itra_c")


class DisjointClassesWarning(UserWarning):
    """No class is present in both batches of a class-conditional match."""


def _labels(labels, m: int, K: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.shape[0] != m:
        raise DimensionError(f"{y.shape[0]} labels for a batch of {m}")
    if y.size and (y.min() < 0 or (K is not None and y.max() >= K)):
        raise ContractError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
    return y


def log_softmax(logits) -> Tensor:
    logits = ag.tensor(logits)
    return logits - ag.logsumexp(logits, axis=1, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-probability of the true labels."""
    logits = ag.tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be [m, K] with K >= 2, got {logits.shape}")
    y = _labels(labels, logits.shape[0], logits.shape[1])
    return -ag.mean(ag.pick(log_softmax(logits), y))


def label_smoothing_ce(logits, labels, eps: float) -> Tensor:
    """Cross-entropy against ``(1 - eps) * one_hot + eps / K``."""
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {eps}")
    logits = ag.tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be [m, K] with K >= 2, got {logits.shape}")
    m, K = logits.shape
    y = _labels(labels, m, K)
    logp = log_softmax(logits)
    nll = -ag.mean(ag.pick(logp, y))
    if eps == 0.0:
        return nll
    uniform = -ag.mean(ag.mean(logp, axis=1))
    return ag.scale(nll, 1.0 - eps) + ag.scale(uniform, eps)


@dataclass(frozen=True)
class CenterState:
    centers: np.ndarray
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ContractError(f"center update rate must lie in (0, 1], got {self.rate}")

    @classmethod
    def zeros(cls, num_classes: int, dim: int, rate: float = 0.5) -> "CenterState":
        return cls(np.zeros((num_classes, dim)), rate)


def center_loss(features, labels, state: CenterState) -> tuple[Tensor, CenterState]:
    """``(1/2m) sum ||h_i - c_{y_i}||^2`` and the moving-average center update.

    Centers are constants for the gradient. The update follows the usual rule
    ``c_k -= rate * sum_{y_i=k}(c_k - h_i) / (1 + n_k)``, computed from the
    current feature values; callers swap it in after their parameter step.
    """
    h = ag.tensor(features)
    m, d = h.shape
    if state.centers.shape[1] != d:
        raise DimensionError(f"features have dim {d}, centers {state.centers.shape}")
    y = _labels(labels, m, state.centers.shape[0])
    diff = h - state.centers[y]
    loss = ag.scale(ag.tsum(ag.square(diff)), 0.5 / m)

    centers = state.centers
    delta = np.zeros_like(centers)
    np.add.at(delta, y, centers[y] - h.data)
    counts = np.bincount(y, minlength=centers.shape[0])
    new = centers - state.rate * delta / (1.0 + counts)[:, None]
    return loss, CenterState(new, state.rate)


def match_loss(H1, H2, spec: KernelSpec | None = None) -> Tensor:
    """MMD between the features of two mini-batches; gradients reach both."""
    return mmd(H1, H2, spec)


def match_loss_classcond(H1, labels1, H2, labels2, num_classes: int,
                         spec: KernelSpec | None = None) -> Tensor:
    """Class-conditional matching: ``(1/K) * sum_k MMD(H1^k, H2^k)``.

    Only classes with at least one sample in both batches contribute.
    """
    H1, H2 = ag.tensor(H1), ag.tensor(H2)
    y1 = _labels(labels1, H1.shape[0], num_classes)
    y2 = _labels(labels2, H2.shape[0], num_classes)
    total = None
    for k in range(num_classes):
        i1 = np.flatnonzero(y1 == k)
        i2 = np.flatnonzero(y2 == k)
        if i1.size == 0 or i2.size == 0:
            continue
        term = mmd(ag.take_rows(H1, i1), ag.take_rows(H2, i2), spec)
        total = term if total is None else total + term
    if total is None:
        warnings.warn("no class present in both batches; matching term is 0",
                      DisjointClassesWarning, stacklevel=2)
        return ag.scale(ag.tsum(H1), 0.0) + ag.scale(ag.tsum(H2), 0.0)
    return ag.scale(total, 1.0 / num_classes)


class Forward(NamedTuple):
    """Features, logits and labels of one mini-batch."""
    h: Tensor
    o: Tensor
    labels: np.ndarray


class Objective(NamedTuple):
    total: Tensor
    ce: float
    reg: float
    centers: CenterState | None


def total_objective(method: str, first: Forward, second: Forward | None = None,
                    lam: float = 0.0, *, num_classes: int | None = None,
                    kernel: KernelSpec | None = None, smoothing: float = 0.1,
                    centers: CenterState | None = None) -> Objective:
    """Combine cross-entropy on the first batch with the method's regulariser.

    Only the first batch enters the cross-entropy; the second batch is used by
    the matching term alone.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    ce = cross_entropy(first.o, first.labels)
    K = num_classes if num_classes is not None else first.o.shape[1]

    if method == "baseline":
        return Objective(ce, ce.item(), 0.0, centers)
    if method == "lsr":
        smoothed = label_smoothing_ce(first.o, first.labels, smoothing)
        return Objective(smoothed, ce.item(), 0.0, centers)
    if method == "center":
        if centers is None:
            centers = CenterState.zeros(K, first.h.shape[1])
        closs, new_centers = center_loss(first.h, first.labels, centers)
        return Objective(ce + ag.scale(closs, lam), ce.item(), closs.item(), new_centers)

    if second is None:
        raise ContractError(f"method {method!r} needs a second mini-batch")
    if method == "itra":
        reg = match_loss(first.h, second.h, kernel)
    else:
        reg = match_loss_classcond(first.h, first.labels, second.h, second.labels, K, kernel)
    return Objective(ce + ag.scale(reg, lam), ce.item(), reg.item(), centers)
