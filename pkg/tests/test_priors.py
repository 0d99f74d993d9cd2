import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpcert.errors import InvalidParameterError, ShapeError
from pnpcert.groups import make_group
from pnpcert.priors import GmmPrior, random_gmm, smooth, symmetrize

# log p(0) for {1/2 N(+2, 2), 1/2 N(-2, 2)}: -1 - log(4 pi)/2, evaluated with mpmath at 30 digits
LOGP_BIMODAL_SMOOTH_AT_0 = -2.2655121234846454


def test_smooth_standard_normal_2d():
    p = smooth(GmmPrior.gaussian(np.zeros(2), np.eye(2)), 1.0)
    np.testing.assert_array_equal(p.covs[0], 2 * np.eye(2))
    np.testing.assert_array_equal(p.means[0], np.zeros(2))


def test_smooth_componentwise(bimodal):
    p = bimodal.smooth(1.0)
    np.testing.assert_array_equal(p.covs[:, 0, 0], [2.0, 2.0])
    np.testing.assert_array_equal(p.weights, bimodal.weights)
    np.testing.assert_array_equal(p.means, bimodal.means)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_smooth_rejects_nonpositive_sigma(bimodal, sigma):
    with pytest.raises(InvalidParameterError):
        bimodal.smooth(sigma)


def test_smooth_matches_monte_carlo_convolution():
    prior = random_gmm(4, 3, seed=3, shared_cov=False)
    sigma = 0.5
    points = np.random.default_rng(4).standard_normal((20, 4))
    n_mc = 1_000_000
    xs = prior.sample(5, n_mc)
    exact = np.exp(prior.smooth(sigma).log_density(points))
    norm = (2 * math.pi * sigma**2) ** -2
    for v, ref in zip(points, exact):
        kern = norm * np.exp(-np.sum((xs - v) ** 2, axis=1) / (2 * sigma**2))
        mean, se = kern.mean(), kern.std() / math.sqrt(n_mc)
        assert abs(mean - ref) <= 3 * se + 1e-15


def test_log_density_standard_normal_at_mode():
    p = GmmPrior.gaussian([0.0], [[1.0]])
    assert p.log_density([0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_log_density_bimodal_at_zero(bimodal):
    assert bimodal.smooth(1.0).log_density([0.0]) == pytest.approx(LOGP_BIMODAL_SMOOTH_AT_0, abs=1e-14)


def test_log_density_shape_error(bimodal):
    with pytest.raises(ShapeError):
        bimodal.log_density([0.0, 1.0])


def test_score_gaussian():
    p = GmmPrior.gaussian(np.zeros(2), 2 * np.eye(2))
    np.testing.assert_allclose(p.score([2.0, 0.0]), [-1.0, 0.0], atol=1e-15)


def test_score_symmetric_mixture_at_zero(bimodal):
    assert bimodal.smooth(1.0).score([0.0]) == pytest.approx([0.0], abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.sampled_from([1, 2, 3]))
def test_score_and_hessian_match_finite_differences(seed, dim):
    p = random_gmm(dim, 3, seed, shared_cov=False)
    x = np.random.default_rng(seed).standard_normal(dim)
    h = 1e-5
    eye = np.eye(dim)
    fd = np.array([(p.log_density(x + h * e) - p.log_density(x - h * e)) / (2 * h) for e in eye])
    np.testing.assert_allclose(p.score(x), fd, rtol=1e-6, atol=1e-7)
    fd_hess = np.array([(p.score(x + h * e) - p.score(x - h * e)) / (2 * h) for e in eye])
    np.testing.assert_allclose(p.hessian_log_density(x), fd_hess, rtol=1e-5, atol=1e-6)


def test_batched_matches_pointwise():
    p = random_gmm(3, 4, 1)
    xs = np.random.default_rng(2).standard_normal((7, 3))
    np.testing.assert_allclose(p.score(xs), np.stack([p.score(x) for x in xs]), atol=1e-15)
    np.testing.assert_allclose(p.log_density(xs), [p.log_density(x) for x in xs], atol=1e-14)


def test_sample_mean_standard_normal():
    xs = GmmPrior.gaussian(np.zeros(2), np.eye(2)).sample(0, 100_000)
    # 3 sigma / sqrt(N) is about 0.0095
    assert np.all(np.abs(xs.mean(axis=0)) < 0.02)


def test_sample_deterministic():
    p = random_gmm(2, 3, 9)
    np.testing.assert_array_equal(p.sample(11, 50), p.sample(11, 50))


def test_sample_component_fraction():
    p = GmmPrior([0.9, 0.1], [[-50.0], [50.0]], [[[1.0]], [[1.0]]])
    xs = p.sample(1, 100_000)
    assert abs(np.mean(xs[:, 0] < 0) - 0.9) < 0.01


def test_symmetrize_sign_flip_two_element_orbit():
    mu = np.array([1.0, -0.5])
    p = GmmPrior.gaussian(mu, np.eye(2)).symmetrize(make_group("sign_flip", 2))
    np.testing.assert_allclose(p.weights, [0.5, 0.5])
    np.testing.assert_allclose(p.means, [mu, -mu])
    np.testing.assert_allclose(p.covs, [np.eye(2), np.eye(2)])


def test_symmetrize_idempotent_on_density(bimodal):
    g = make_group("sign_flip", 1)
    again = symmetrize(bimodal, g)
    xs = np.random.default_rng(0).standard_normal((100, 1)) * 3
    np.testing.assert_allclose(again.log_density(xs), bimodal.log_density(xs), rtol=1e-12)


@pytest.mark.parametrize(
    "weights, covs",
    [([0.5, 0.6], [[[1.0]], [[1.0]]]), ([1.5, -0.5], [[[1.0]], [[1.0]]]), ([0.5, 0.5], [[[1.0]], [[-1.0]]])],
)
def test_invalid_mixtures(weights, covs):
    with pytest.raises(InvalidParameterError):
        GmmPrior(weights, [[0.0], [1.0]], covs)


def test_asymmetric_covariance_rejected():
    with pytest.raises(InvalidParameterError):
        GmmPrior.gaussian([0.0, 0.0], [[1.0, 0.1], [0.0, 1.0]])


def test_json_round_trip():
    p = random_gmm(3, 2, 4, shared_cov=False)
    q = GmmPrior.from_json(p.to_json())
    np.testing.assert_array_equal(q.means, p.means)
    np.testing.assert_array_equal(q.covs, p.covs)
    np.testing.assert_array_equal(q.weights, p.weights)


def test_shared_covariance_detection():
    assert random_gmm(2, 3, 0, shared_cov=True).shared_covariance() is not None
    assert random_gmm(2, 3, 0, shared_cov=False).shared_covariance() is None
