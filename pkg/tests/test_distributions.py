import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from edgeless.distributions import (
    DirichletParams,
    DistributionError,
    GammaParams,
    MvNormalParams,
    WishartParams,
    categorical_entropy,
    dirichlet_moments,
    gamma_moments,
    sample,
    wishart_moments,
)

N_MC = 1_000_000


def within_se(samples, analytic, k=3.0):
    """Monte-Carlo mean of ``samples`` (first axis) within k standard errors."""
    samples = np.asarray(samples)
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    return np.all(np.abs(samples.mean(axis=0) - analytic) <= k * se + 1e-15)


def random_spd(p, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((p, p))
    return m @ m.T + p * np.eye(p)


# -- gamma ------------------------------------------------------------------------


def test_gamma_noise_prior_moments():
    mean, var, _ = gamma_moments(GammaParams(100.0, 10.0))
    assert mean == pytest.approx(10.0)
    assert var == pytest.approx(1.0)


def test_gamma_unit_moments():
    mean, var, elog = gamma_moments(GammaParams(1.0, 1.0))
    assert (mean, var) == (1.0, 1.0)
    assert elog == pytest.approx(-np.euler_gamma)


def test_gamma_monte_carlo():
    q = GammaParams(3.7, 2.2)
    draws = q.sample(11, N_MC)
    mean, var, elog = gamma_moments(q)
    assert within_se(draws, mean)
    assert within_se(np.log(draws), elog)
    assert within_se((draws - mean) ** 2, var)


def test_gamma_entropy_matches_scipy():
    q = GammaParams(np.array([0.3, 3.7, 50.0]), np.array([0.1, 2.2, 7.0]))
    expected = stats.gamma(q.shape, scale=1 / q.rate).entropy()
    np.testing.assert_allclose(q.entropy(), expected, rtol=1e-12)


def test_gamma_logpdf_matches_scipy_and_rejects_off_support():
    q = GammaParams(3.7, 2.2)
    x = np.array([0.1, 1.0, 4.0])
    np.testing.assert_allclose(q.logpdf(x), stats.gamma(3.7, scale=1 / 2.2).logpdf(x), rtol=1e-12)
    with pytest.raises(DistributionError):
        q.logpdf(-1.0)
    with pytest.raises(DistributionError):
        GammaParams(0.0, 1.0)


# -- wishart ----------------------------------------------------------------------


@pytest.mark.parametrize("p", [1, 2, 5])
@pytest.mark.parametrize("w", [0.05, 1.0, 20.0])
def test_wishart_prior_mean_is_inverse_w(p, w):
    q = WishartParams(p, p * w * np.eye(p))
    np.testing.assert_allclose(q.mean(), np.eye(p) / w, rtol=1e-12)


def test_wishart_one_dimensional_is_gamma():
    for nu, W in [(1.0, 1.0), (3.3, 0.7), (50.0, 2.0)]:
        wm, elogdet = wishart_moments(WishartParams(nu, [[W]]))
        gm, gv, gelog = gamma_moments(GammaParams(nu / 2, W / 2))
        assert wm[0, 0] == pytest.approx(gm, rel=1e-14)
        assert elogdet == pytest.approx(gelog, rel=1e-12, abs=1e-14)
        assert WishartParams(nu, [[W]]).variance()[0, 0] == pytest.approx(gv, rel=1e-12)
        assert WishartParams(nu, [[W]]).entropy() == pytest.approx(GammaParams(nu / 2, W / 2).entropy(), rel=1e-12)


def test_wishart_monte_carlo_sum_of_outer_products():
    # integer shape: X = sum_j g_j g_j^T with g_j ~ N(0, W^-1), independent of the library sampler
    nu, p = 5, 3
    W = random_spd(p, 3)
    V = np.linalg.inv(W)
    rng = np.random.default_rng(5)
    g = rng.standard_normal((N_MC, nu, p)) @ np.linalg.cholesky(V).T
    X = np.einsum("njp,njq->npq", g, g)
    mean, elogdet = wishart_moments(WishartParams(nu, W))
    assert within_se(X.reshape(N_MC, -1), mean.ravel())
    assert within_se(np.linalg.slogdet(X)[1], elogdet)
    var = WishartParams(nu, W).variance()
    assert within_se(((X - mean) ** 2).reshape(N_MC, -1), var.ravel())


def test_wishart_sampler_moments():
    q = WishartParams(7.5, random_spd(2, 8))
    X = q.sample(2, 200_000)
    assert within_se(X.reshape(len(X), -1), q.mean().ravel())
    assert within_se(np.linalg.slogdet(X)[1], q.expected_logdet())


def test_wishart_entropy_matches_scipy():
    W = random_spd(3, 1)
    q = WishartParams(6.2, W)
    assert q.entropy() == pytest.approx(stats.wishart(df=6.2, scale=np.linalg.inv(W)).entropy(), rel=1e-12)


def test_wishart_logpdf_matches_scipy():
    W = random_spd(2, 4)
    X = random_spd(2, 9)
    assert WishartParams(4.5, W).logpdf(X) == pytest.approx(stats.wishart(df=4.5, scale=np.linalg.inv(W)).logpdf(X), rel=1e-12)
    with pytest.raises(DistributionError):
        WishartParams(4.5, W).logpdf(-X)


@given(st.floats(2.01, 200.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_wishart_jensen_gap_positive(nu, seed):
    p = 2
    q = WishartParams(nu, random_spd(p, seed))
    gap = np.linalg.slogdet(q.mean())[1] - q.expected_logdet()
    assert gap > 0


def test_wishart_rejects_invalid():
    with pytest.raises(DistributionError):
        WishartParams(0.5, np.eye(2))
    with pytest.raises(DistributionError):
        WishartParams(3.0, -np.eye(2)).mean()


# -- dirichlet --------------------------------------------------------------------


def test_dirichlet_symmetric_mean():
    mean, _ = dirichlet_moments(DirichletParams([1.0, 1.0]))
    np.testing.assert_allclose(mean, [0.5, 0.5])


def test_dirichlet_two_three():
    q = DirichletParams([2.0, 3.0])
    np.testing.assert_allclose(q.mean(), [0.4, 0.6])
    assert q.variance()[0] == pytest.approx(0.04)


def test_dirichlet_monte_carlo():
    q = DirichletParams([0.3, 1.7, 4.0])
    draws = q.sample(17, N_MC)
    mean, elog = dirichlet_moments(q)
    assert within_se(draws, mean)
    assert within_se(np.log(draws), elog)
    assert within_se((draws - mean) ** 2, q.variance())


def test_dirichlet_entropy_matches_scipy():
    alpha = np.array([0.3, 1.7, 4.0])
    assert DirichletParams(alpha).entropy() == pytest.approx(stats.dirichlet(alpha).entropy(), rel=1e-12)


def test_dirichlet_logpdf_off_support():
    q = DirichletParams([2.0, 3.0])
    assert q.logpdf([0.4, 0.6]) == pytest.approx(stats.dirichlet([2.0, 3.0]).logpdf([0.4, 0.6]))
    with pytest.raises(DistributionError):
        q.logpdf([0.5, 0.6])


# -- normal -----------------------------------------------------------------------


def test_normal_sample_mean():
    draws = sample(MvNormalParams([0.0], [[1.0]]), 0, N_MC)
    assert abs(draws.mean()) < 0.005


def test_normal_monte_carlo_second_moment():
    P = random_spd(3, 2)
    q = MvNormalParams(np.array([0.5, -1.0, 2.0]), P)
    draws = q.sample(4, N_MC)
    outer = np.einsum("ni,nj->nij", draws, draws).reshape(N_MC, -1)
    assert within_se(draws, q.mean)
    assert within_se(outer, q.second_moment.ravel())


def test_normal_entropy_and_logpdf_match_scipy():
    P = random_spd(3, 6)
    m = np.array([1.0, 0.0, -1.0])
    ref = stats.multivariate_normal(m, np.linalg.inv(P))
    q = MvNormalParams(m, P)
    assert q.entropy() == pytest.approx(ref.entropy(), rel=1e-12)
    x = np.array([0.3, 0.2, 0.1])
    assert q.logpdf(x) == pytest.approx(ref.logpdf(x), rel=1e-12)
    with pytest.raises(DistributionError):
        q.logpdf([np.nan, 0.0, 0.0])


def test_normal_rejects_non_spd_precision():
    with pytest.raises(DistributionError):
        MvNormalParams([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]).covariance


# -- sampling ---------------------------------------------------------------------


def test_wishart_draws_are_spd():
    draws = sample(WishartParams(50.0, np.eye(2)), 3, 10_000)
    assert np.all(np.linalg.eigvalsh(draws) > 0)


def test_sparse_dirichlet_draws_on_simplex():
    draws = sample(DirichletParams(np.full(10, 1e-3)), 3, 10_000)
    assert np.all(draws >= 0)
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "dist",
    [GammaParams(2.0, 3.0), WishartParams(3.0, np.eye(2)), DirichletParams([1.0, 2.0]), MvNormalParams([0.0], [[2.0]])],
)
def test_sampling_is_deterministic(dist):
    np.testing.assert_array_equal(sample(dist, 42, 5), sample(dist, 42, 5))
    assert not np.array_equal(sample(dist, 42, 5), sample(dist, 43, 5))


def test_sample_count_must_be_positive():
    with pytest.raises(DistributionError):
        sample(GammaParams(1.0, 1.0), 0, 0)


def test_categorical_entropy_zero_convention():
    assert categorical_entropy([1.0, 0.0]) == 0.0
    assert categorical_entropy([0.5, 0.5]) == pytest.approx(np.log(2))
