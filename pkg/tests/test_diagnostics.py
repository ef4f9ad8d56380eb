import json

import numpy as np
import pytest

from itra.diagnostics import (CHECKS, check_closed_form_gradient, check_gradient_bound, check_modality_alignment,
                              check_weight_identity, cross_mode_mass, cross_term_centroid,
                              cross_term_direct, gradient_bound, run_checks)
from itra.kernels import KernelSpec, adaptive_weights, mmd_grad_closed_form, mmd_squared


def test_closed_form_passes_and_reports():
    r = check_closed_form_gradient(trials=100, seed=1)
    assert r.passed and r.measured["max_rel_err"] <= 1e-8 and r.measured["samples_checked"] > 100
    json.loads(r.to_json())


def test_closed_form_sign_flip_negative_control():
    flipped = lambda *a: -mmd_grad_closed_form(*a)  # noqa: E731
    r = check_closed_form_gradient(trials=20, seed=1, closed_form=flipped)
    assert not r.passed and r.failures and "closed_form" in r.failures[0]


def test_closed_form_printed_cross_coefficient_fails():
    """Doubling the cross-batch term (2 / (m1 m2)) disagrees with autodiff."""
    def doubled(i, H1, H2, sigma, M):
        H1, H2 = np.asarray(H1), np.asarray(H2)
        d1, d2 = H1[i] - H1, H1[i] - H2
        e1 = np.exp(-(d1 ** 2).sum(1) / sigma)
        e2 = np.exp(-(d2 ** 2).sum(1) / sigma)
        return -2 / np.sqrt(M) * ((e1[:, None] * d1).sum(0) / (sigma * len(H1) ** 2)
                                  - 2 * (e2[:, None] * d2).sum(0) / (sigma * len(H1) * len(H2)))
    assert not check_closed_form_gradient(trials=20, seed=2, closed_form=doubled).passed


def test_closed_form_symmetric_configuration_is_zero():
    H1 = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0]])
    H2 = np.array([[2.0, -2.0], [-2.0, 2.0]])
    M = mmd_squared(H1, H2, KernelSpec.single(2.0)).item()
    assert np.abs(mmd_grad_closed_form(0, H1, H2, 2.0, M)).max() <= 1e-15


def test_bound_bound_passes():
    r = check_gradient_bound(trials=100, seed=3)
    assert r.passed and r.measured["ladder_monotone"]
    assert r.measured["outlier_grad_ratio"] <= 1e-3
    assert r.measured["outlier_min_dist_over_sqrt_sigma"] >= 10


def test_bound_in_cluster_bound_not_vacuous(rng):
    H1, H2 = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 1
    M = mmd_squared(H1, H2, KernelSpec.single(2.0)).item()
    for i in range(6):
        b = gradient_bound(i, H1, H2, 2.0, M)
        assert np.isfinite(b) and np.linalg.norm(mmd_grad_closed_form(i, H1, H2, 2.0, M)) <= b


def test_bound_corrupted_bound_negative_control():
    shrunk = lambda *a, **k: 0.1 * gradient_bound(*a, **k)  # noqa: E731
    r = check_gradient_bound(trials=20, seed=3, bound=shrunk)
    assert not r.passed and r.failures


def test_modality_alignment_passes_and_records_threshold():
    r = check_modality_alignment()
    assert r.passed and r.measured["mean_cross_mode_mass"] <= 0.05
    thr = r.measured["empirical_threshold"]
    assert thr is not None and thr <= 10
    ladder = dict(zip(r.measured["ladder"], r.measured["ladder_mass"]))
    assert ladder[thr] <= 0.05


def test_modality_coincident_modes_give_sample_fraction():
    r = check_modality_alignment(separation=0.0, probes=40, batch=80, ladder=(0,))
    assert r.measured["mean_cross_mode_mass"] == pytest.approx(0.5, abs=0.1)
    assert not r.passed


def test_midpoint_probe_splits_mass_evenly():
    H2 = np.array([[-5.0, 0.0], [5.0, 0.0], [-5.0, 1.0], [5.0, 1.0]])
    other = np.array([False, True, False, True])
    assert cross_mode_mass(np.array([0.0, 0.5]), H2, other, 10.0) == pytest.approx(0.5, abs=1e-12)


def test_modality_uniform_weights_negative_control():
    uniform = lambda h, H2, s: np.full(len(H2), 1 / len(H2))  # noqa: E731
    assert not check_modality_alignment(weights=uniform, ladder=(10,)).passed


def test_weight_identity_passes():
    r = check_weight_identity(trials=200, seed=4)
    assert r.passed and r.measured["min_weight"] >= 0 and r.measured["max_simplex_sum_err"] <= 1e-12


def test_weight_identity_single_pair_and_centroid(rng):
    h, H2 = rng.normal(size=3), rng.normal(size=(1, 3))
    M = mmd_squared(h[None], H2, KernelSpec.single(1.0)).item()
    direct = cross_term_direct(h, H2, 1.0, M)
    e = np.exp(-np.sum((h - H2[0]) ** 2))
    assert np.allclose(direct, 2 / np.sqrt(M) * e * (h - H2[0]), atol=1e-15)
    angles = np.linspace(0, 2 * np.pi, 5)[:-1]
    ring = np.c_[np.cos(angles), np.sin(angles), np.zeros(4)] + h
    w = adaptive_weights(h, ring, 1.0)
    assert np.allclose(w, 0.25, atol=1e-15)
    assert np.allclose(cross_term_centroid(h, ring, 1.0, 1.0), 0.0, atol=1e-14)


def test_weight_identity_corrupted_weights_negative_control():
    skewed = lambda h, H2, s: adaptive_weights(h, H2, 2 * s)  # noqa: E731
    r = check_weight_identity(trials=50, seed=4, weights=skewed)
    assert not r.passed and r.failures


def test_run_checks_deterministic():
    a = [r.to_json() for r in run_checks("weights", seed=5)]
    b = [r.to_json() for r in run_checks("weights", seed=5)]
    assert a == b
    assert set(CHECKS) == {"gradient", "bound", "modality", "weights"}
