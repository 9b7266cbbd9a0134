import json
import math

import numpy as np
import pytest

from mixnorm import gmm
from mixnorm.gmm import GmmParams, InsufficientSamplesError, Responsibilities


def naive_mixture_logpdf(x, params):
    """Per-sample log density by explicit loops, no log-space tricks."""
    out = []
    for row in x:
        total = 0.0
        for k in range(params.K):
            dens = 1.0
            for d in range(params.D):
                var = params.variances[k, d]
                diff = row[d] - params.means[k, d]
                dens *= math.exp(-0.5 * diff * diff / var) / math.sqrt(2 * math.pi * var)
            total += params.weights[k] * dens
        out.append(math.log(total))
    return np.array(out)


def random_params(rng, k, d):
    w = rng.dirichlet(np.ones(k))
    return GmmParams(w, rng.normal(size=(k, d)), rng.uniform(0.5, 2.0, size=(k, d)))


# -- seeding ---------------------------------------------------------------

def test_seed_single_cluster_refines_to_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    c = gmm.kmeanspp_seed(x, 1, rng)
    assert any(np.array_equal(c[0], row) for row in x)
    refined = gmm.kmeans_iterate(x, c, 1)
    np.testing.assert_allclose(refined[0], x.mean(axis=0), atol=1e-14)


def test_seed_exact_points_when_m_equals_k():
    x = np.array([[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0], [7.0, -1.0]])
    c = gmm.kmeanspp_seed(x, 4, np.random.default_rng(3))
    assert sorted(map(tuple, c)) == sorted(map(tuple, x))


def test_seed_insufficient_samples():
    with pytest.raises(InsufficientSamplesError):
        gmm.kmeanspp_seed(np.zeros((2, 1)), 3, np.random.default_rng(0))


def test_seed_lands_in_both_modes():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(0, 1, 500), rng.normal(10, 1, 500)])[:, None]
        c = gmm.kmeanspp_seed(x, 2, rng).ravel()
        lo = np.any((c >= -3) & (c <= 3))
        hi = np.any((c >= 7) & (c <= 13))
        hits += bool(lo and hi)
    assert hits / 100 > 0.99


def test_default_trials():
    assert gmm.default_trials(1) == 2
    assert gmm.default_trials(3) == math.ceil(2 + math.log(3)) == 4


# -- k-means ---------------------------------------------------------------

def test_kmeans_zero_iters_is_identity():
    c = np.array([[0.3], [0.7]])
    np.testing.assert_array_equal(gmm.kmeans_iterate(np.zeros((4, 1)), c, 0), c)


def test_kmeans_hand_step():
    x = np.array([[-1.0], [-1.0], [1.0], [1.0]])
    c = gmm.kmeans_iterate(x, np.array([[-0.5], [0.5]]), 1)
    np.testing.assert_array_equal(c.ravel(), [-1.0, 1.0])


def test_kmeans_wcss_non_increasing():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(int(rng.integers(5, 60)), int(rng.integers(1, 4))))
        k = int(rng.integers(1, 5))
        c = x[rng.choice(x.shape[0], k, replace=False)]
        prev = gmm.wcss(x, c)
        for _ in range(5):
            c = gmm.kmeans_iterate(x, c, 1)
            cur = gmm.wcss(x, c)
            assert cur <= prev * (1 + 1e-12) + 1e-12
            prev = cur


def test_kmeans_reseeds_empty_cluster():
    x = np.array([[0.0], [0.1], [10.0]])
    c = gmm.kmeans_iterate(x, np.array([[0.0], [100.0]]), 1)
    assert 10.0 in c.ravel()


# -- E/M steps -------------------------------------------------------------

def test_e_step_single_component():
    x = np.random.default_rng(0).normal(size=(7, 2))
    resp = gmm.e_step(x, GmmParams([1.0], [[0.0, 0.0]], [[1.0, 1.0]]))
    np.testing.assert_array_equal(resp.nu, 1.0)
    np.testing.assert_allclose(resp.nu_hat, 1 / 7, atol=1e-15)


def test_e_step_far_components():
    params = GmmParams([0.5, 0.5], [[0.0], [10.0]], [[1.0], [1.0]])
    nu = gmm.e_step(np.array([[0.0]]), params).nu[0]
    # direct ratio: exp(-0) / (exp(-0) + exp(-50))
    oracle = 1.0 / (1.0 + math.exp(-50.0))
    assert nu[0] >= 1 - 1e-10
    assert abs(nu[0] - oracle) < 1e-15


def test_e_step_symmetric_point():
    params = GmmParams([0.5, 0.5], [[0.0], [10.0]], [[1.0], [1.0]])
    nu = gmm.e_step(np.array([[5.0]]), params).nu[0]
    np.testing.assert_allclose(nu, [0.5, 0.5], atol=1e-12)


def test_e_step_no_underflow_far_away():
    params = GmmParams([0.5, 0.5], [[0.0], [1e4]], [[1.0], [1.0]])
    resp = gmm.e_step(np.array([[-1e4], [2e4]]), params)
    assert np.all(np.isfinite(resp.nu))
    np.testing.assert_allclose(resp.nu.sum(axis=1), 1.0, atol=1e-12)


def test_responsibility_normalization():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 3))
    resp = gmm.e_step(x, random_params(rng, 4, 3))
    np.testing.assert_allclose(resp.nu.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(resp.nu_hat.sum(axis=0), 1.0, atol=1e-12)
    assert np.all((resp.nu >= 0) & (resp.nu <= 1))


def test_m_step_hard_assignments():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 2))
    labels = np.arange(30) % 3
    log_nu = np.where(np.eye(3)[labels] > 0, 0.0, -np.inf)
    p = gmm.m_step(x, Responsibilities(log_nu))
    for k in range(3):
        members = x[labels == k]
        np.testing.assert_allclose(p.means[k], members.mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(p.variances[k], members.var(axis=0), atol=1e-14)
        assert p.weights[k] == pytest.approx(1 / 3, abs=1e-15)


def test_m_step_identical_samples_hit_floor():
    x = np.tile([[2.5, -1.0]], (10, 1))
    p = gmm.m_step(x, Responsibilities(np.zeros((10, 1))))
    np.testing.assert_array_equal(p.means, [[2.5, -1.0]])
    np.testing.assert_array_equal(p.variances, gmm.VAR_FLOOR)


def test_m_step_uniform_nu_gives_global_mean():
    x = np.random.default_rng(3).normal(size=(20, 2))
    p = gmm.m_step(x, Responsibilities(np.full((20, 3), math.log(1 / 3))))
    np.testing.assert_allclose(p.means, np.tile(x.mean(axis=0), (3, 1)), atol=1e-14)


# -- likelihood ------------------------------------------------------------

def test_log_likelihood_standard_normal_at_mean():
    d = 3
    p = GmmParams([1.0], np.zeros((1, d)), np.ones((1, d)))
    assert gmm.log_likelihood(np.zeros((1, d)), p) == pytest.approx(-0.5 * d * math.log(2 * math.pi), abs=1e-14)


def test_log_likelihood_matches_naive_sum():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = random_params(rng, 3, 2)
        x = rng.normal(size=(10, 2))
        assert abs(gmm.log_likelihood(x, p) - naive_mixture_logpdf(x, p).mean()) < 1e-12


def test_log_likelihood_permutation_invariant():
    rng = np.random.default_rng(9)
    p = random_params(rng, 3, 2)
    x = rng.normal(size=(25, 2))
    assert gmm.log_likelihood(x, p) == pytest.approx(gmm.log_likelihood(x[rng.permutation(25)], p), abs=1e-14)


# -- pruning ---------------------------------------------------------------

def test_prune_boundary():
    rng = np.random.default_rng(0)
    w = np.array([0.99, 0.01 - 1e-6, 1e-6])
    p = GmmParams(w, rng.normal(size=(3, 1)), np.ones((3, 1)))
    x = rng.normal(size=(12, 1))
    resp = gmm.e_step(x, p)
    p2, r2 = gmm.prune_components(p, resp)
    assert p2.K == 1
    assert abs(p2.weights.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(r2.nu.sum(axis=1), 1.0, atol=1e-12)


def test_prune_noop():
    p = GmmParams([0.5, 0.5], [[0.0], [1.0]], [[1.0], [1.0]])
    resp = gmm.e_step(np.array([[0.2]]), p)
    p2, r2 = gmm.prune_components(p, resp)
    assert p2 is p and r2 is resp


def test_prune_rows_renormalized():
    rng = np.random.default_rng(4)
    for _ in range(20):
        w = rng.dirichlet(np.ones(5) * 0.3)
        p = GmmParams(w, rng.normal(size=(5, 2)), np.ones((5, 2)))
        resp = gmm.e_step(rng.normal(size=(15, 2)), p)
        p2, r2 = gmm.prune_components(p, resp, 0.1)
        # oracle: explicit division of surviving columns
        keep = w >= 0.1 if (w >= 0.1).any() else w == w.max()
        sub = resp.nu[:, keep]
        np.testing.assert_allclose(r2.nu, sub / sub.sum(axis=1, keepdims=True), atol=1e-12)
        np.testing.assert_allclose(r2.nu.sum(axis=1), 1.0, atol=1e-12)
        assert p2.K == keep.sum() >= 1


def test_prune_all_below_threshold_keeps_heaviest():
    p = GmmParams([0.3, 0.4, 0.3], np.zeros((3, 1)), np.ones((3, 1)))
    p2 = gmm.prune_weights(p, 0.5)
    assert p2.K == 1 and p2.weights[0] == 1.0


# -- full fit --------------------------------------------------------------

def test_fit_recovers_two_modes():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(-2, 0.5, 1000), rng.normal(2, 0.5, 1000)])[:, None]
        p = gmm.fit_gmm(x, 2, em_iters=2, rng=rng)
        order = np.argsort(p.means[:, 0])
        np.testing.assert_allclose(p.means[order, 0], [-2, 2], atol=0.1)
        np.testing.assert_allclose(p.weights, 0.5, atol=0.05)


@pytest.mark.parametrize("iters", [0, 1, 3])
def test_fit_single_component_closed_form(iters):
    x = np.random.default_rng(1).normal(3, 2, size=(200, 2))
    p = gmm.fit_gmm(x, 1, em_iters=iters, rng=np.random.default_rng(0))
    np.testing.assert_allclose(p.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(p.variances[0], x.var(axis=0), rtol=1e-12)
    assert p.weights[0] == 1.0


def test_fit_em_monotone():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k_true = int(rng.integers(1, 4))
        x = np.concatenate([rng.normal(rng.normal(0, 4, 2), rng.uniform(0.3, 2), size=(60, 2)) for _ in range(k_true)])
        trace = []
        gmm.fit_gmm(x, int(rng.integers(1, 5)), em_iters=6, rng=rng, prune_threshold=0.0, trace=trace)
        for a, b in zip(trace, trace[1:]):
            assert b >= a - 1e-9 * abs(a)


def test_fit_deterministic():
    x = np.random.default_rng(0).normal(size=(300, 3))
    a = gmm.fit_gmm(x, 3, em_iters=2, rng=np.random.default_rng(7), subsample_fraction=0.5)
    b = gmm.fit_gmm(x, 3, em_iters=2, rng=np.random.default_rng(7), subsample_fraction=0.5)
    for f in ("weights", "means", "variances"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_fit_scale_equivariant():
    rng = np.random.default_rng(11)
    x = np.concatenate([rng.normal(0, 1, (100, 2)), rng.normal(5, 1, (100, 2))])
    c = 3.7
    a = gmm.fit_gmm(x, 2, em_iters=2, rng=np.random.default_rng(1))
    b = gmm.fit_gmm(c * x, 2, em_iters=2, rng=np.random.default_rng(1))
    np.testing.assert_allclose(b.means, c * a.means, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.variances, c * c * a.variances, rtol=1e-9)
    np.testing.assert_allclose(b.weights, a.weights, rtol=1e-9)


def test_fit_insufficient_after_subsample():
    with pytest.raises(InsufficientSamplesError):
        gmm.fit_gmm(np.random.default_rng(0).normal(size=(8, 1)), 3, rng=np.random.default_rng(0), subsample_fraction=0.25)


def test_fit_degenerate_batch_collapses():
    p = gmm.fit_gmm(np.ones((20, 2)), 3, em_iters=1, rng=np.random.default_rng(0))
    assert p.K == 1


def test_params_json_roundtrip():
    p = random_params(np.random.default_rng(0), 3, 2)
    d = json.loads(json.dumps(p.to_dict()))
    assert set(d) == {"K", "D", "lambda", "mu", "sigma2"}
    q = GmmParams.from_dict(d)
    assert np.array_equal(q.means, p.means) and np.array_equal(q.weights, p.weights)


def test_split_em_budget():
    assert gmm.split_em_budget(2) == (1, 1)
    assert gmm.split_em_budget(4) == (2, 2)
    with pytest.raises(ValueError):
        gmm.split_em_budget(3)
