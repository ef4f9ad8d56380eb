"""Independent reference implementations used across the test modules.

These deliberately avoid the library's vectorised code paths: plain Python
loops over samples, ``math.exp`` and explicit sorting.
"""
import math

import numpy as np
import pytest


def sq_dist_loop(x, y):
    return sum((float(a) - float(b)) ** 2 for a, b in zip(x, y))


def median_sq_dist_oracle(X, Y):
    pooled = [list(r) for r in np.asarray(X)] + [list(r) for r in np.asarray(Y)]
    vals = sorted(sq_dist_loop(pooled[i], pooled[j])
                  for i in range(len(pooled)) for j in range(i + 1, len(pooled)))
    n = len(vals)
    mid = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
    return max(mid, 1e-8)


def kernel_oracle(d2, bandwidths):
    return sum(math.exp(-d2 / b) for b in bandwidths) / len(bandwidths)


def mmd_oracle(X, Y, sigma=None, multipliers=(1, 2, 4, 8, 16), eps=1e-12):
    """Double-loop V-statistic; ``sigma`` fixes a single bandwidth."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if sigma is None:
        med = median_sq_dist_oracle(X, Y)
        bws = [m * med for m in multipliers]
    else:
        bws = [sigma]
    m, n = len(X), len(Y)
    kxx = sum(kernel_oracle(sq_dist_loop(a, b), bws) for a in X for b in X)
    kyy = sum(kernel_oracle(sq_dist_loop(a, b), bws) for a in Y for b in Y)
    kxy = sum(kernel_oracle(sq_dist_loop(a, b), bws) for a in X for b in Y)
    bracket = kxx / m ** 2 + kyy / n ** 2 - 2.0 * kxy / (m * n)
    return math.sqrt(max(bracket, 0.0) + eps)


def ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits), labels):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        total += lse - row[y]
    return total / len(labels)


def lsr_oracle(logits, labels, eps):
    total = 0.0
    for row, y in zip(np.asarray(logits), labels):
        K = len(row)
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        target = [eps / K + (1 - eps) * (k == y) for k in range(K)]
        total += -sum(t * (row[k] - lse) for k, t in enumerate(target))
    return total / len(labels)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def freeze_bandwidths(monkeypatch, evaluate):
    """Record the median bandwidths used by ``evaluate()`` and replay them in order.

    The library treats the bandwidth as a constant of each call, so a
    finite-difference oracle must not let it move with the perturbation.
    """
    import itra.kernels as kernels

    real = kernels.median_bandwidth
    recorded = []

    def record(X, Y):
        recorded.append(real(X, Y))
        return recorded[-1]

    monkeypatch.setattr(kernels, "median_bandwidth", record)
    evaluate()
    state = {"i": 0}

    def replay(X, Y):
        v = recorded[state["i"] % len(recorded)]
        state["i"] += 1
        return v

    monkeypatch.setattr(kernels, "median_bandwidth", replay)
    return recorded
