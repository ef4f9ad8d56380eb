"""Executable checks of the matching-gradient analysis.

Each check is deterministic given its seed and returns a
:class:`DiagnosticReport`. The formulas under test can be swapped out
(``closed_form=``, ``bound=``, ``weights=``) so negative controls can confirm
that a corrupted formula is caught.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import MixtureSpec, gen_gaussian_mixture
from .kernels import (KernelSpec, adaptive_weights, median_bandwidth, mmd,
                      mmd_grad_closed_form, mmd_squared)

MAX_LOGGED_FAILURES = 20


@dataclass
class DiagnosticReport:
    name: str
    passed: bool
    measured: dict
    tolerances: dict
    config: dict
    failures: list = field(default_factory=list)
    notes: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def g_decay(r, a: float):
    """``exp(-r^2 / a) * r / a``, the norm of one kernel-gradient term."""
    r = np.asarray(r, dtype=np.float64)
    return np.exp(-r * r / a) * r / a


def gradient_bound(i: int, H1, H2, sigma: float, M: float, cross_coef: float = 2.0) -> float:
    """Triangle-inequality bound on the norm of the matching gradient at ``H1[i]``.

    ``cross_coef=2`` gives the looser form with ``2 / (m1 m2)`` on the
    cross-batch sum; ``cross_coef=1`` is the tight form that matches the
    exact gradient term by term. Both must hold.
    """
    H1, H2 = np.asarray(H1), np.asarray(H2)
    m1, m2 = len(H1), len(H2)
    r1 = np.linalg.norm(H1[i] - H1, axis=1)
    r2 = np.linalg.norm(H1[i] - H2, axis=1)
    return 2.0 / np.sqrt(M) * (g_decay(r1, sigma).sum() / m1 ** 2
                               + cross_coef * g_decay(r2, sigma).sum() / (m1 * m2))


def _autodiff_grad(H1, H2, sigma: float) -> np.ndarray:
    h1 = ag.Tensor(H1, requires_grad=True)
    ag.backward(mmd(h1, H2, KernelSpec.single(sigma), eps=0.0))
    return h1.grad


def _random_pair(rng, max_m: int, max_d: int, min_m: int = 1):
    while True:
        m1 = int(rng.integers(min_m, max_m + 1))
        m2 = int(rng.integers(1, max_m + 1))
        d = int(rng.integers(1, max_d + 1))
        H1 = rng.normal(size=(m1, d))
        H2 = rng.normal(size=(m2, d)) + rng.normal(scale=1.5, size=d)
        sigma = median_bandwidth(H1, H2)
        M = mmd_squared(H1, H2, KernelSpec.single(sigma)).item()
        if M > 1e-4:
            return H1, H2, sigma, M


def check_closed_form_gradient(trials: int = 1000, max_m: int = 16, max_d: int = 8, seed: int = 0,
              rtol: float = 1e-8,
              closed_form: Callable = mmd_grad_closed_form) -> DiagnosticReport:
    """Closed-form per-sample gradient vs reverse-mode autodiff through ``mmd``."""
    rng = np.random.default_rng(seed)
    worst, failures, checked = 0.0, [], 0
    for t in range(trials):
        H1, H2, sigma, M = _random_pair(rng, max_m, max_d)
        auto = _autodiff_grad(H1, H2, sigma)
        for i in range(len(H1)):
            cf = closed_form(i, H1, H2, sigma, M)
            scale = max(np.linalg.norm(auto[i]), np.linalg.norm(cf))
            err = np.linalg.norm(cf - auto[i]) / scale if scale > 1e-300 else 0.0
            worst = max(worst, err)
            checked += 1
            if err > rtol and len(failures) < MAX_LOGGED_FAILURES:
                failures.append({"trial": t, "i": i, "rel_err": err,
                                 "closed_form": cf, "autodiff": auto[i]})
    passed = worst <= rtol
    return DiagnosticReport(
        "closed_form_gradient", passed, {"max_rel_err": worst, "samples_checked": checked},
        {"rel_err": rtol}, {"trials": trials, "max_m": max_m, "max_d": max_d, "seed": seed},
        failures,
        "single Gaussian kernel, sigma = pooled median; M is the squared estimate")


def check_gradient_bound(trials: int = 1000, ladder=(2, 3, 4, 6, 8, 12, 16, 24), sigma: float | None = None,
                    seed: int = 0, max_m: int = 16, max_d: int = 8,
                    bound: Callable = gradient_bound, slack: float = 1e-12,
                    outlier_ratio_tol: float = 1e-3) -> DiagnosticReport:
    """Gradient-norm bound on random sets, plus outlier damping on a planted point."""
    rng = np.random.default_rng(seed)
    worst_ratio, failures, checked = 0.0, [], 0
    for t in range(trials):
        H1, H2, s, M = _random_pair(rng, max_m, max_d)
        s = sigma if sigma is not None else s
        M = mmd_squared(H1, H2, KernelSpec.single(s)).item()
        if not M > 0:
            continue
        for A, B in ((H1, H2), (H2, H1)):
            auto = _autodiff_grad(A, B, s)
            for i in range(len(A)):
                lhs = np.linalg.norm(auto[i])
                rhs_tight = bound(i, A, B, s, M, cross_coef=1.0)
                rhs = bound(i, A, B, s, M, cross_coef=2.0)
                checked += 1
                ok = np.isfinite(rhs) and lhs <= rhs_tight * (1 + slack) + 1e-300 and rhs_tight <= rhs
                if rhs_tight > 0:
                    worst_ratio = max(worst_ratio, lhs / rhs_tight)
                if not ok and len(failures) < MAX_LOGGED_FAILURES:
                    failures.append({"trial": t, "i": i, "lhs": lhs, "rhs": rhs, "rhs_tight": rhs_tight})
    bound_ok = not failures

    # planted outlier, fixed bandwidth, moving away along a geometric ladder
    cluster1 = rng.normal(size=(16, 4))
    cluster2 = rng.normal(size=(16, 4))
    s_fixed = sigma if sigma is not None else median_bandwidth(cluster1, cluster2)
    direction = rng.normal(size=4)
    direction /= np.linalg.norm(direction)
    centre = cluster1.mean(axis=0)
    ladder_norms = []
    for k in ladder:
        H1 = np.vstack([cluster1, centre + k * np.sqrt(s_fixed) * direction])
        ladder_norms.append(float(np.linalg.norm(_autodiff_grad(H1, cluster2, s_fixed)[-1])))
    monotone = all(b <= a + slack for a, b in zip(ladder_norms, ladder_norms[1:]))

    # outlier at >= 10 sqrt(sigma_med) from every other point, sigma_med from the pooled pair
    dist = 10.0
    while True:
        H1 = np.vstack([cluster1, centre + dist * np.sqrt(s_fixed) * direction])
        s_med = median_bandwidth(H1, cluster2)
        others = np.vstack([cluster1, cluster2])
        min_d = np.linalg.norm(others - H1[-1], axis=1).min()
        if min_d >= 10.0 * np.sqrt(s_med):
            break
        dist *= 1.25
    grads = np.linalg.norm(_autodiff_grad(H1, cluster2, s_med), axis=1)
    ratio = float(grads[-1] / np.median(grads[:-1]))
    damped = ratio <= outlier_ratio_tol

    return DiagnosticReport(
        "gradient_bound", bound_ok and monotone and damped,
        {"samples_checked": checked, "max_lhs_over_tight_rhs": worst_ratio,
         "ladder": list(ladder), "ladder_grad_norms": ladder_norms, "ladder_monotone": monotone,
         "outlier_min_dist_over_sqrt_sigma": float(min_d / np.sqrt(s_med)),
         "outlier_grad_ratio": ratio},
        {"slack": slack, "outlier_ratio": outlier_ratio_tol},
        {"trials": trials, "sigma": sigma, "seed": seed},
        failures,
        "both the tight (1/(m1 m2)) and the looser (2/(m1 m2)) cross coefficients are checked")


def cross_mode_mass(probe, H2, other_mode, sigma: float, weights: Callable = adaptive_weights) -> float:
    """Total adaptive weight that ``probe`` puts on rows of ``H2`` flagged ``other_mode``."""
    w = weights(probe, H2, sigma)
    return float(np.sum(w[np.asarray(other_mode, dtype=bool)]))


def _modality_mass(separation, std, dim, batch, probes, seed, policy, weights):
    half = batch // 2
    spec = MixtureSpec.two_mode(separation, std, count=half + probes, dim=dim, seed=seed)
    ds = gen_gaussian_mixture(spec)
    sel = ds.labels == 0
    x, mode = ds.inputs[sel], ds.modes[sel]
    md1, md2 = x[mode == 0], x[mode == 1]
    H2 = np.vstack([md1[:half], md2[:half]])
    other = np.r_[np.zeros(half, bool), np.ones(half, bool)]
    P = md1[half:half + probes]
    if policy == "probe_pool":
        sigma = median_bandwidth(P, H2)
    elif policy == "batch":
        sigma = median_bandwidth(H2[: len(H2) // 2], H2[len(H2) // 2:])
    else:
        raise ValueError(f"unknown sigma policy {policy!r}")
    return [cross_mode_mass(p, H2, other, sigma, weights) for p in P]


def check_modality_alignment(separation: float = 10.0, std: float = 1.0, dim: int = 2,
                             batch: int = 40, probes: int = 20, seeds=(0, 1, 2, 3, 4),
                             policy: str = "probe_pool", tol: float = 0.05,
                             ladder=(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12),
                             weights: Callable = adaptive_weights) -> DiagnosticReport:
    """Weight a mode-1 probe puts on the other mode of a two-mode batch.

    The batch holds ``batch // 2`` samples of each mode. The bandwidth is the
    median over the probes pooled with the batch (``policy="probe_pool"``) or
    over the batch alone (``policy="batch"``). Also reports the smallest
    separation/std ratio on ``ladder`` at which the mean mass falls to ``tol``.
    """
    seed_means, all_mass = [], []
    for seed in seeds:
        mass = _modality_mass(separation, std, dim, batch, probes, seed, policy, weights)
        all_mass.extend(mass)
        seed_means.append(float(np.mean(mass)))
    mean_mass = float(np.mean(all_mass))

    curve = []
    for ratio in ladder:
        vals = []
        for seed in seeds:
            vals.extend(_modality_mass(ratio * std, std, dim, batch, probes, seed, policy, weights))
        curve.append(float(np.mean(vals)))
    threshold = next((r for r, v in zip(ladder, curve) if v <= tol), None)

    return DiagnosticReport(
        "modality_alignment", mean_mass <= tol,
        {"mean_cross_mode_mass": mean_mass, "max_cross_mode_mass": float(np.max(all_mass)),
         "per_seed_mean": seed_means, "ladder": list(ladder), "ladder_mass": curve,
         "empirical_threshold": threshold},
        {"cross_mode_mass": tol},
        {"separation_over_std": separation / std, "dim": dim, "batch": batch,
         "probes": probes, "seeds": list(seeds), "sigma_policy": policy},
        [] if mean_mass <= tol else [{"mean_cross_mode_mass": mean_mass, "per_seed_mean": seed_means}],
        "empirical_threshold is the smallest ladder ratio whose mean mass is within tolerance")


def cross_term_direct(h, H2, sigma: float, M: float) -> np.ndarray:
    """Matching gradient of ``MMD({h}, H2)`` at ``h``, summed kernel by kernel."""
    H2 = np.asarray(H2, dtype=np.float64)
    diff = np.asarray(h) - H2
    e = np.exp(-np.sum(diff * diff, axis=1) / sigma)
    return 2.0 / (np.sqrt(M) * len(H2) * sigma) * (e[:, None] * diff).sum(axis=0)


def cross_term_centroid(h, H2, sigma: float, M: float, weights: Callable = adaptive_weights) -> np.ndarray:
    """The same gradient written as a pull towards the weighted centroid of ``H2``."""
    H2 = np.asarray(H2, dtype=np.float64)
    diff = np.asarray(h) - H2
    A = np.exp(-np.sum(diff * diff, axis=1) / sigma).sum()
    w = weights(h, H2, sigma)
    return 2.0 * A / (np.sqrt(M) * len(H2) * sigma) * (np.asarray(h) - w @ H2)


def check_weight_identity(trials: int = 1000, seed: int = 0, max_m: int = 16, max_d: int = 8,
                          tol: float = 1e-10, simplex_tol: float = 1e-12,
                          weights: Callable = adaptive_weights) -> DiagnosticReport:
    """Direct cross-term sum vs the weighted-centroid form, plus simplex checks."""
    rng = np.random.default_rng(seed)
    worst, worst_auto, worst_simplex, min_w = 0.0, 0.0, 0.0, np.inf
    failures = []
    for t in range(trials):
        m2 = int(rng.integers(1, max_m + 1))
        d = int(rng.integers(1, max_d + 1))
        h = rng.normal(size=d)
        H2 = rng.normal(size=(m2, d)) + rng.normal(scale=1.5, size=d)
        sigma = median_bandwidth(h[None, :], H2)
        M = mmd_squared(h[None, :], H2, KernelSpec.single(sigma)).item()
        if not M > 1e-8:
            continue
        w = weights(h, H2, sigma)
        min_w = min(min_w, float(w.min()))
        worst_simplex = max(worst_simplex, abs(float(w.sum()) - 1.0))
        direct = cross_term_direct(h, H2, sigma, M)
        centroid = cross_term_centroid(h, H2, sigma, M, weights)
        auto = _autodiff_grad(h[None, :], H2, sigma)[0]
        scale = max(np.linalg.norm(direct), 1e-300)
        err = np.linalg.norm(direct - centroid) / scale
        err_auto = np.linalg.norm(direct - auto) / scale
        worst, worst_auto = max(worst, err), max(worst_auto, err_auto)
        if (err > tol or err_auto > 1e-8) and len(failures) < MAX_LOGGED_FAILURES:
            failures.append({"trial": t, "rel_err": err, "rel_err_autodiff": err_auto,
                             "direct": direct, "centroid": centroid})
    simplex_ok = min_w >= 0 and worst_simplex <= simplex_tol
    passed = worst <= tol and worst_auto <= 1e-8 and simplex_ok
    if not simplex_ok:
        failures.append({"min_weight": min_w, "max_sum_err": worst_simplex})
    return DiagnosticReport(
        "weight_identity", passed,
        {"max_rel_err": worst, "max_rel_err_vs_autodiff": worst_auto,
         "min_weight": min_w, "max_simplex_sum_err": worst_simplex},
        {"identity_rel_err": tol, "autodiff_rel_err": 1e-8, "simplex": simplex_tol},
        {"trials": trials, "seed": seed, "max_m": max_m, "max_d": max_d},
        failures,
        "first batch is the single sample h, so the self term vanishes and the "
        "cross term is the whole matching gradient")


CHECKS = {
    "gradient": check_closed_form_gradient,
    "bound": check_gradient_bound,
    "modality": check_modality_alignment,
    "weights": check_weight_identity,
}


def run_checks(which: str = "all", seed: int = 0) -> list[DiagnosticReport]:
    names = list(CHECKS) if which == "all" else [which]
    reports = []
    for name in names:
        fn = CHECKS[name]
        if name == "modality":
            reports.append(fn(seeds=tuple(seed + s for s in range(5))))
        else:
            reports.append(fn(seed=seed))
    return reports
