import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from smlmc.errors import DomainError, PopulationError
from smlmc.kernel import characteristic_features, make_kernel, params_from_features
from smlmc.population import (
    ClusterMember,
    PopulationConfig,
    aggregate_cluster,
    build_population_model,
    decompose_B,
    density_weighted_mean,
    gmm_cluster_bic,
    grid_mode_search,
    kernel_features,
    kde_silverman,
    silverman_bandwidth,
)


def test_silverman_bandwidth_formula():
    x = np.random.default_rng(0).normal(size=200)
    iqr = np.subtract(*np.percentile(x, [75, 25])) / 1.34
    assert silverman_bandwidth(x) == pytest.approx(0.9 * min(x.std(ddof=1), iqr) * 200 ** (-0.2), rel=1e-12)


def test_kde_matches_scipy_with_same_bandwidth():
    x = np.random.default_rng(1).normal(size=50)
    kde = kde_silverman(x)
    ref = scipy.stats.gaussian_kde(x, bw_method=kde.bandwidth / x.std(ddof=1))
    grid = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(kde(grid), ref(grid), rtol=1e-10)


def test_density_weighted_mean_symmetric_and_constant():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    assert density_weighted_mean(x) == pytest.approx(0.0, abs=1e-12)
    assert density_weighted_mean([3.0, 3.0]) == 3.0


def test_density_weighted_mean_resists_outlier():
    x = np.r_[np.full(19, 1.0) + np.linspace(-0.01, 0.01, 19), 100.0]
    # the lone outlier carries only its own kernel's density
    assert density_weighted_mean(x) < 2.0 < np.mean(x)


def test_grid_mode_finds_dominant_peak():
    rng = np.random.default_rng(2)
    x = np.r_[rng.normal(0, 0.1, 200), rng.normal(5, 0.1, 50)]
    assert grid_mode_search(x) == pytest.approx(0.0, abs=0.05)


def test_grid_mode_tie_breaks_low():
    assert grid_mode_search([0.0, 1.0], grid=101) < 0.5


def test_kde_domain_errors():
    with pytest.raises(DomainError):
        kde_silverman([])
    with pytest.raises(DomainError):
        grid_mode_search([1.0, math.nan])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_decompose_B_round_trip_full_rank(seed, D):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(D, D))
    B = M @ M.T + np.diag(rng.uniform(0, 1, D))
    A, lam = decompose_B(B, D)
    assert np.linalg.norm(A @ A.T + np.diag(lam) - B) < 1e-8
    assert np.all(lam >= 0)


def test_decompose_B_rejects_asymmetric():
    with pytest.raises(DomainError):
        decompose_B(np.array([[1.0, 0.5], [0.0, 1.0]]), 2)
    with pytest.raises(DomainError):
        decompose_B(np.eye(2), 3)


def _features(periods, ells, rng, jitter=0.01):
    out = []
    for p, l in zip(periods, ells):
        out.append(kernel_features(params_from_features(p * (1 + jitter * rng.normal()), l * (1 + jitter * rng.normal()))))
    return out


def test_gmm_separates_two_families():
    rng = np.random.default_rng(3)
    feats = _features([24.0] * 15 + [math.inf] * 15, [72.0] * 30, rng)
    res = gmm_cluster_bic(feats, Q_max=5, seed=0)
    assert res.Q_prime == 2
    assert len(set(res.labels[:15])) == 1 and len(set(res.labels[15:])) == 1
    assert res.labels[0] == 0  # numbered by first appearance


def test_gmm_identical_features_single_cluster():
    f = kernel_features(params_from_features(24.0, 10.0))
    assert gmm_cluster_bic([f] * 5).Q_prime == 1


def test_aggregate_sums_within_patient():
    p = params_from_features(24.0, 48.0)
    B = np.eye(2)
    members = [ClusterMember("a", 0, B, p), ClusterMember("a", 1, B, p), ClusterMember("b", 0, 2 * B, p)]
    agg, params = aggregate_cluster(members)
    np.testing.assert_allclose(agg, 2 * B)
    assert characteristic_features(params)[0] == pytest.approx(24.0)


def _fit(pid, rng, zero_second=False):
    a1 = np.array([[1.0], [0.8]]) + 0.05 * rng.normal(size=(2, 1))
    a2 = np.zeros((2, 1)) if zero_second else np.array([[0.6], [-0.5]]) + 0.05 * rng.normal(size=(2, 1))
    lam2 = np.zeros(2) if zero_second else np.full(2, 0.05)
    k = make_kernel(
        [24.0 * (1 + 0.02 * rng.normal()), math.inf],
        [72.0 * (1 + 0.02 * rng.normal()), 72.0 * (1 + 0.02 * rng.normal())],
        [a1, a2],
        [np.full(2, 0.05), lam2],
        [0.05, 0.05],
    )
    return SimpleNamespace(kernel=k, patient_id=pid, mean=np.zeros(2), scale=np.ones(2), covariate_names=["x", "y"])


def test_population_model_from_two_kernel_fits():
    rng = np.random.default_rng(4)
    fits = [_fit(f"P{i}", rng) for i in range(12)]
    m = build_population_model(fits, seed=0)
    assert m.Q_prime == 2
    periods = sorted(characteristic_features(c.params)[0] for c in m.clusters)
    assert periods[0] == pytest.approx(24.0, rel=0.05)
    assert all(c.coverage == 1.0 for c in m.clusters)
    assert m.to_kernel().D == 2
    shuffled = build_population_model(fits[::-1], seed=0)
    np.testing.assert_array_equal(shuffled.clusters[0].B, m.clusters[0].B)


def test_zero_kernels_dropped_and_all_zero_fails():
    rng = np.random.default_rng(5)
    fits = [_fit(f"P{i}", rng, zero_second=True) for i in range(6)]
    m = build_population_model(fits, PopulationConfig(), seed=0)
    assert m.Q_prime == 1
    for f in fits:
        f.kernel.weights[0].A[:] = 0.0
        f.kernel.weights[0].lam[:] = 0.0
    with pytest.raises(PopulationError):
        build_population_model(fits)


def test_duplicate_patient_ids_rejected():
    rng = np.random.default_rng(6)
    with pytest.raises(DomainError):
        build_population_model([_fit("P", rng), _fit("P", rng)])
