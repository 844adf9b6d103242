import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cellpr.density import (VAR_FLOOR, Gmm, bic, em_fit, grad_log_density, kl_closed_form_gaussian, kl_mc_paired,
                            kl_mc_standard, log_density, responsibilities, sample, select_k_bic)


def naive_log_density(gmm, x):
    total = 0.0
    for w, m, v in zip(gmm.weights, gmm.means, gmm.variances):
        dens = w
        for xi, mi, vi in zip(x, m, v):
            dens *= math.exp(-(xi - mi) ** 2 / (2 * vi)) / math.sqrt(2 * math.pi * vi)
        total += dens
    return math.log(total)


def random_gmm(rng, k, d):
    w = rng.dirichlet(np.ones(k))
    return Gmm(w, rng.normal(0, 2, (k, d)), rng.uniform(0.3, 3, (k, d)))


# ---------------------------------------------------------------- fitting

def test_single_component_is_closed_form():
    rng = np.random.default_rng(0)
    x = rng.normal([1.0, -2.0], [0.5, 3.0], (400, 2))
    g = em_fit(x, 1).gmm
    assert np.allclose(g.means[0], x.mean(axis=0), atol=1e-12)
    assert np.allclose(g.variances[0], x.var(axis=0), atol=1e-12)
    assert g.weights[0] == 1.0


def test_two_clusters_recovered():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-5, 1, 500), rng.normal(5, 1, 500)])[:, None]
    g = em_fit(x, 2, seed=0).gmm
    assert np.allclose(np.sort(g.means[:, 0]), [-5, 5], atol=0.1)
    assert np.allclose(g.weights, 0.5, atol=0.05)


def test_log_likelihood_monotone_over_many_datasets():
    for s in range(100):
        rng = np.random.default_rng(s)
        x = np.concatenate([rng.normal(rng.normal(0, 3, 2), 1, (40, 2)) for _ in range(3)])
        trace = em_fit(x, 3, seed=s).log_likelihood
        assert all(b >= a - 1e-8 for a, b in zip(trace, trace[1:]))


def test_variance_floor_on_constant_data():
    g = em_fit(np.full((20, 2), 3.0), 1).gmm
    assert np.all(g.variances == VAR_FLOOR)
    assert np.isfinite(log_density(g, np.array([3.0, 3.0])))


def test_fit_rejects_too_few_samples():
    with pytest.raises(ValueError):
        em_fit(np.zeros((1, 2)), 2)


def test_bic_prefers_two_clusters():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(-5, 1, 300), rng.normal(5, 1, 300)])[:, None]
    assert select_k_bic(x).gmm.k == 2
    one, two = em_fit(x, 1).gmm, em_fit(x, 2).gmm
    assert bic(two, x) < bic(one, x)


def test_fit_is_seed_deterministic():
    x = np.random.default_rng(3).normal(size=(100, 3))
    a, b = em_fit(x, 3, seed=5).gmm, em_fit(x, 3, seed=5).gmm
    assert np.array_equal(a.means, b.means) and np.array_equal(a.variances, b.variances)


# ---------------------------------------------------------------- evaluation

def test_standard_normal_peak():
    assert log_density(Gmm.gaussian([0.0], 1.0), np.array([0.0])) == pytest.approx(-0.918939, abs=1e-6)


def test_duplicate_components_match_single():
    rng = np.random.default_rng(4)
    g = Gmm.gaussian([1.0, 2.0], [0.5, 2.0])
    dup = Gmm([0.3, 0.7], np.repeat(g.means, 2, axis=0), np.repeat(g.variances, 2, axis=0))
    x = rng.normal(size=(50, 2))
    assert np.allclose(log_density(g, x), log_density(dup, x), atol=1e-12)


def test_log_density_matches_naive_sum():
    rng = np.random.default_rng(5)
    for _ in range(30):
        g = random_gmm(rng, 3, 2)
        x = rng.normal(0, 2, 2)
        assert log_density(g, x) == pytest.approx(naive_log_density(g, x), abs=1e-12)


def test_log_density_far_tail_is_finite():
    g = Gmm([0.5, 0.5], [[0.0], [1.0]], [[1e-4], [1e-4]])
    v = log_density(g, np.array([1e3]))
    assert np.isfinite(v) and v < -1e9


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        log_density(Gmm.gaussian([0.0, 0.0], 1.0), np.zeros(3))


def test_responsibilities_sum_to_one():
    rng = np.random.default_rng(6)
    r = responsibilities(random_gmm(rng, 4, 3), rng.normal(size=(20, 3)))
    assert np.allclose(r.sum(axis=1), 1.0)


def test_gaussian_gradient_closed_form():
    g = Gmm.gaussian([1.0, -1.0], [2.0, 0.5])
    x = np.array([0.3, 0.4])
    assert np.allclose(grad_log_density(g, x), (g.means[0] - x) / g.variances[0])


@given(st.integers(0, 10_000))
def test_grad_log_density_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3, 2)
    x = rng.normal(0, 2, 2)
    an = grad_log_density(g, x)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (log_density(g, x + e) - log_density(g, x - e)) / (2 * h)
        assert abs(an[j] - fd) <= 1e-6 * max(1.0, abs(fd))


# ---------------------------------------------------------------- sampling

def test_sample_moments():
    g = Gmm([0.25, 0.75], [[-2.0], [2.0]], [[0.5], [1.0]])
    x = sample(g, 200_000, seed=0)[:, 0]
    mean = 0.25 * -2 + 0.75 * 2
    var = 0.25 * (0.5 + 4) + 0.75 * (1 + 4) - mean ** 2
    assert x.mean() == pytest.approx(mean, abs=0.02)
    assert x.var() == pytest.approx(var, rel=0.02)
    phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    below = 0.25 * phi(2 / math.sqrt(0.5)) + 0.75 * phi(-2.0)
    assert np.mean(x < 0) == pytest.approx(below, abs=0.005)


def test_sample_reproducible():
    g = Gmm.gaussian([0.0, 1.0], 1.0)
    assert np.array_equal(sample(g, 10, seed=3), sample(g, 10, seed=3))


# ---------------------------------------------------------------- KL

@pytest.mark.parametrize("p,q,exact", [
    (Gmm.gaussian([0.0], 1.0), Gmm.gaussian([1.0], 1.0), 0.5),
    (Gmm.gaussian([0.0], 1.0), Gmm.gaussian([0.0], 4.0), 0.318147),
])
def test_kl_examples(p, q, exact):
    assert kl_closed_form_gaussian(p, q) == pytest.approx(exact, abs=1e-6)
    est = kl_mc_standard(p, q, 100_000, seed=0)
    assert abs(est.value - exact) <= 3 * est.stderr


def test_kl_identical_is_zero():
    g = Gmm.gaussian([0.3, -1.0], [1.0, 2.0])
    est = kl_mc_standard(g, g, 1000, seed=1)
    assert est.value == 0.0 and est.stderr == 0.0


def test_kl_closed_form_additive_over_dimensions():
    p2 = Gmm.gaussian([0.0, 1.0], [1.0, 2.0])
    q2 = Gmm.gaussian([1.0, -1.0], [3.0, 0.5])
    parts = sum(kl_closed_form_gaussian(Gmm.gaussian([p2.means[0, j]], p2.variances[0, j]),
                                        Gmm.gaussian([q2.means[0, j]], q2.variances[0, j])) for j in range(2))
    assert kl_closed_form_gaussian(p2, q2) == pytest.approx(parts, abs=1e-12)


def test_kl_mc_mixture_against_high_sample_reference():
    rng = np.random.default_rng(7)
    p, q = random_gmm(rng, 2, 2), random_gmm(rng, 3, 2)
    ref = kl_mc_standard(p, q, 400_000, seed=99)
    est = kl_mc_standard(p, q, 50_000, seed=1)
    assert est.value >= -3 * est.stderr
    assert abs(est.value - ref.value) <= 3 * math.hypot(est.stderr, ref.stderr)


def test_kl_shards_and_threads_do_not_change_result():
    p, q = Gmm.gaussian([0.0], 1.0), Gmm.gaussian([0.5], 2.0)
    a = kl_mc_standard(p, q, 10_001, seed=4, shards=8, threads=1)
    b = kl_mc_standard(p, q, 10_001, seed=4, shards=8, threads=4)
    assert a == b


def test_paired_example():
    p, q = Gmm.gaussian([0.0], 1.0), Gmm.gaussian([1.0], 1.0)
    assert kl_mc_paired(p, q, [[0.0]], [[0.0]]) == pytest.approx(0.5, abs=1e-12)


def test_paired_identical_is_zero_and_shape_checked():
    g = Gmm.gaussian([0.0, 0.0], 1.0)
    v = np.random.default_rng(8).normal(size=(5, 2))
    assert kl_mc_paired(g, g, v, v) == 0.0
    with pytest.raises(ValueError):
        kl_mc_paired(g, g, v, v[:3])


# ---------------------------------------------------------------- serialization

def test_json_round_trip(tmp_path):
    g = random_gmm(np.random.default_rng(9), 3, 4)
    g.save(tmp_path / "g.json")
    h = Gmm.load(tmp_path / "g.json")
    assert np.array_equal(g.weights, h.weights) and np.array_equal(g.means, h.means)
    assert np.array_equal(g.variances, h.variances)


def test_json_rejects_bad_version_and_header():
    raw = Gmm.gaussian([0.0], 1.0).to_json()
    with pytest.raises(ValueError):
        Gmm.from_json({**raw, "format_version": 99})
    with pytest.raises(ValueError):
        Gmm.from_json({**raw, "K": 2})


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        Gmm([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        Gmm([1.0], [[0.0]], [[1e-6]])
